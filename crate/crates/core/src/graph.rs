//! Heterogeneous order graph and its normalized bipartite blocks.
//!
//! Each order links its elements as a chain `retailer - origin - destination -
//! payment slot`, i.e. three undirected edges per order. Every pair of node
//! types induces a bipartite subgraph whose adjacency
//!
//! ```text
//! A = [[0, R], [Rᵀ, 0]]
//! ```
//!
//! is re-normalized as `D̂^{-1/2} (A + I) D̂^{-1/2}` with `d_u = 1 + deg(u)`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;
use std::sync::Arc;

use crate::data::{Dataset, ElementType, Interner};
use crate::error::{IgtError, Result};
use crate::kernels::Csr;

/// Type pairs that can carry edges under the chain construction.
pub const CHAIN_PAIRS: [(ElementType, ElementType); 3] = [
    (ElementType::Retailer, ElementType::Origin),
    (ElementType::Origin, ElementType::Destination),
    (ElementType::Destination, ElementType::PaymentSlot),
];

/// All unordered pairs of distinct node types.
pub fn all_pairs() -> Vec<(ElementType, ElementType)> {
    let t = ElementType::ALL;
    (0..4)
        .flat_map(|a| (a + 1..4).map(move |b| (t[a], t[b])))
        .collect()
}

/// External identifier to dense index, per node type.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeRegistry {
    types: [Interner; 4],
}

impl NodeRegistry {
    pub fn count(&self, kind: ElementType) -> usize {
        self.types[kind.index()].len()
    }

    pub fn counts(&self) -> [usize; 4] {
        ElementType::ALL.map(|k| self.count(k))
    }

    pub fn index(&self, kind: ElementType, external_id: &str) -> Option<usize> {
        self.types[kind.index()].get(external_id)
    }

    pub fn register(&mut self, kind: ElementType, external_id: &str) -> usize {
        self.types[kind.index()].intern(external_id)
    }

    pub fn name(&self, kind: ElementType, idx: usize) -> &str {
        self.types[kind.index()].name(idx)
    }

    /// Identifiers of one type in index order.
    pub fn ids(&self, kind: ElementType) -> Vec<String> {
        (0..self.count(kind))
            .map(|i| self.name(kind, i).to_string())
            .collect()
    }

    pub fn from_ids(ids: [Vec<String>; 4]) -> Result<Self> {
        let mut reg = Self::default();
        for (kind, list) in ElementType::ALL.into_iter().zip(ids) {
            for (i, id) in list.iter().enumerate() {
                if reg.register(kind, id) != i {
                    return Err(IgtError::Data(format!("duplicate {kind} id '{id}'")));
                }
            }
        }
        Ok(reg)
    }

    /// Graph indices of an order's four elements.
    pub fn order_nodes(&self, ds: &Dataset, order: usize) -> [Option<usize>; 4] {
        let o = &ds.orders()[order];
        ElementType::ALL.map(|k| self.index(k, ds.external_id(k, o.element(k))))
    }
}

fn pair_slot(a: ElementType, b: ElementType) -> Option<(usize, bool)> {
    let (lo, hi, swapped) = if a.index() < b.index() {
        (a, b, false)
    } else {
        (b, a, true)
    };
    all_pairs()
        .iter()
        .position(|&p| p == (lo, hi))
        .map(|i| (i, swapped))
}

/// Typed simple graph. Edges are stored per unordered type pair as
/// `(index in lower type, index in higher type)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeteroGraph {
    pub registry: NodeRegistry,
    edges: [BTreeSet<(usize, usize)>; 6],
}

impl HeteroGraph {
    /// Builds the chain graph from a range of orders.
    pub fn build(ds: &Dataset, orders: Range<usize>) -> Self {
        let mut g = Self::default();
        g.add_orders(ds, orders);
        g
    }

    /// Same registry, no edges; used for node-only extension.
    pub fn register_orders(&mut self, ds: &Dataset, orders: Range<usize>) {
        for i in orders {
            let o = &ds.orders()[i];
            for k in ElementType::ALL {
                self.registry.register(k, ds.external_id(k, o.element(k)));
            }
        }
    }

    fn add_orders(&mut self, ds: &Dataset, orders: Range<usize>) {
        for i in orders {
            let o = &ds.orders()[i];
            let idx = ElementType::ALL
                .map(|k| self.registry.register(k, ds.external_id(k, o.element(k))));
            for (a, b) in CHAIN_PAIRS {
                self.add_edge(a, idx[a.index()], b, idx[b.index()]);
            }
        }
    }

    pub fn add_edge(&mut self, a: ElementType, ia: usize, b: ElementType, ib: usize) {
        let (slot, swapped) = pair_slot(a, b).expect("distinct types");
        let e = if swapped { (ib, ia) } else { (ia, ib) };
        self.edges[slot].insert(e);
    }

    /// Appends unseen elements of `orders` and merges their edges. Existing
    /// indices never move.
    pub fn extend_for_inference(&self, ds: &Dataset, orders: Range<usize>) -> Self {
        let mut g = self.clone();
        g.add_orders(ds, orders);
        g
    }

    /// Appends unseen elements without adding edges.
    pub fn extend_nodes_only(&self, ds: &Dataset, orders: Range<usize>) -> Self {
        let mut g = self.clone();
        g.register_orders(ds, orders);
        g
    }

    pub fn node_count(&self) -> usize {
        self.registry.counts().iter().sum()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(BTreeSet::len).sum()
    }

    /// Undirected edges between two types, as `(index in a, index in b)`.
    pub fn edges_between(&self, a: ElementType, b: ElementType) -> Result<Vec<(usize, usize)>> {
        let (slot, swapped) = pair_slot(a, b)
            .ok_or_else(|| IgtError::Invalid(format!("no bipartite subgraph for ({a}, {b})")))?;
        Ok(self.edges[slot]
            .iter()
            .map(|&(x, y)| if swapped { (y, x) } else { (x, y) })
            .collect())
    }

    /// Subgraph on types `a` and `b`, or `None` when it has no edges. Rows
    /// `0..N_a` are `a` nodes and `N_a..N_a+N_b` are `b` nodes.
    pub fn extract_bipartite(
        &self,
        a: ElementType,
        b: ElementType,
    ) -> Result<Option<BipartiteAdj>> {
        if a == b {
            return Err(IgtError::Invalid(format!(
                "bipartite subgraph needs two distinct types, got ({a}, {b})"
            )));
        }
        let edges = self.edges_between(a, b)?;
        if edges.is_empty() {
            return Ok(None);
        }
        let (na, nb) = (self.registry.count(a), self.registry.count(b));
        let mut triplets = Vec::with_capacity(edges.len() * 2);
        for &(u, v) in &edges {
            triplets.push((u, na + v, 1.0));
            triplets.push((na + v, u, 1.0));
        }
        let adjacency = Csr::from_triplets(na + nb, na + nb, &triplets)?;
        BipartiteAdj::normalize(a, b, na, nb, adjacency).map(Some)
    }

    /// Normalized blocks for every non-empty pair.
    pub fn propagation_blocks(&self) -> Result<Vec<Arc<BipartiteAdj>>> {
        let mut out = Vec::new();
        for (a, b) in all_pairs() {
            if let Some(adj) = self.extract_bipartite(a, b)? {
                out.push(Arc::new(adj));
            }
        }
        Ok(out)
    }

    /// Debug edge list, one `type:idx<TAB>type:idx` line per undirected edge.
    pub fn export_edge_list(&self) -> String {
        let mut s = String::new();
        for (a, b) in all_pairs() {
            for (u, v) in self.edges_between(a, b).expect("valid pair") {
                let _ = writeln!(s, "{a}:{u}\t{b}:{v}");
            }
        }
        s
    }
}

/// A normalized bipartite block.
#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteAdj {
    pub types: (ElementType, ElementType),
    pub n_first: usize,
    pub n_second: usize,
    /// Raw 0/1 adjacency without self-loops.
    pub adjacency: Csr,
    /// Diagonal of `D̂`, i.e. `1 + degree`.
    pub degrees: Vec<f64>,
    /// `D̂^{-1/2} (A + I) D̂^{-1/2}`.
    pub normalized: Arc<Csr>,
}

impl BipartiteAdj {
    pub fn normalize(
        a: ElementType,
        b: ElementType,
        n_first: usize,
        n_second: usize,
        adjacency: Csr,
    ) -> Result<Self> {
        let (normalized, degrees) = renormalize(&adjacency)?;
        Ok(Self {
            types: (a, b),
            n_first,
            n_second,
            adjacency,
            degrees,
            normalized: Arc::new(normalized),
        })
    }

    pub fn n(&self) -> usize {
        self.n_first + self.n_second
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.nnz() / 2
    }
}

/// Self-loop augmented symmetric normalization of a 0/1 adjacency matrix.
/// Returns the normalized matrix and the augmented degrees.
pub fn renormalize(adj: &Csr) -> Result<(Csr, Vec<f64>)> {
    let n = adj.n_rows();
    if adj.n_cols() != n || !adj.is_symmetric() {
        return Err(IgtError::Invalid(
            "adjacency must be square and symmetric".into(),
        ));
    }
    let mut triplets = Vec::with_capacity(adj.nnz() + n);
    let mut degrees = vec![1.0; n];
    #[allow(clippy::needless_range_loop)]
    for r in 0..n {
        for (c, v) in adj.row(r) {
            if r == c {
                return Err(IgtError::Invalid(format!(
                    "adjacency has a self-loop at {r}"
                )));
            }
            if v != 1.0 {
                return Err(IgtError::Invalid(format!(
                    "adjacency entry ({r},{c}) is {v}, not 0/1"
                )));
            }
            degrees[r] += 1.0;
            triplets.push((r, c, 1.0));
        }
        triplets.push((r, r, 1.0));
    }
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d: &f64| 1.0 / d.sqrt()).collect();
    for t in &mut triplets {
        t.2 = inv_sqrt[t.0] * inv_sqrt[t.1];
    }
    Ok((Csr::from_triplets(n, n, &triplets)?, degrees))
}
