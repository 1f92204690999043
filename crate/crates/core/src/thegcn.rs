//! Temporal heterogeneous graph convolution.
//!
//! One step per chronological batch:
//!
//! 1. per non-empty bipartite block, `H_ij^l = Â_ij · H_ij^{l-1}` (no weights,
//!    no activation);
//! 2. per type, sum the type's slices over the blocks it belongs to;
//! 3. after `L` layers, average `H^0 .. H^L`;
//! 4. feed the averaged rows of the batch's nodes and their raw features
//!    through a per-type GRU.
//!
//! The stateful [`EmbeddingTable`] holds `H^0`. After a step the GRU outputs
//! are written back into it as plain values, so gradients never cross a batch
//! boundary.

use std::sync::Arc;

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::ElementType;
use crate::error::{shape_err, IgtError, Result};
use crate::graph::BipartiteAdj;
use crate::params::param_group;
use crate::tensor::Tensor;

/// Per-type `N_i × D` node embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub tables: [Tensor; 4],
}

impl EmbeddingTable {
    pub fn xavier<R: Rng + ?Sized>(counts: [usize; 4], dim: usize, rng: &mut R) -> Self {
        Self {
            tables: counts.map(|n| Tensor::xavier(&[n, dim], rng).param()),
        }
    }

    pub fn zeros(counts: [usize; 4], dim: usize) -> Self {
        Self {
            tables: counts.map(|n| Tensor::zeros(&[n, dim]).param()),
        }
    }

    pub fn dim(&self) -> usize {
        self.tables[0].cols()
    }

    pub fn counts(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.tables[i].shape()[0])
    }

    /// Appends zero rows so each table matches `counts`.
    pub fn grow(&mut self, counts: [usize; 4]) {
        for (t, n) in self.tables.iter_mut().zip(counts) {
            t.grow_rows(n);
        }
    }

    /// Overwrites selected rows of one table.
    pub fn write_rows(&mut self, kind: ElementType, rows: &[usize], values: &Tensor) -> Result<()> {
        let t = &mut self.tables[kind.index()];
        if values.rows() != rows.len() || values.cols() != t.cols() {
            return shape_err("write_rows", &[t.shape(), values.shape()]);
        }
        for (i, &r) in rows.iter().enumerate() {
            t.row_mut(r).copy_from_slice(values.row(i));
        }
        Ok(())
    }
}

param_group! {
    /// GRU cell with hidden state `h` (width D) and input `x`:
    ///
    /// ```text
    /// z = σ(x·wz + h·uz + bz)      r = σ(x·wr + h·ur + br)
    /// n = tanh(x·wh + (r⊙h)·uh + bh)
    /// h' = (1 - z)⊙h + z⊙n
    /// ```
    pub struct GruCell { wz, uz, bz, wr, ur, br, wh, uh, bh }
}

impl GruCell {
    pub fn xavier<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut w = |a, b| Tensor::xavier(&[a, b], rng).param();
        let bias = || Tensor::zeros(&[hidden]).param();
        Self {
            wz: w(input, hidden),
            uz: w(hidden, hidden),
            bz: bias(),
            wr: w(input, hidden),
            ur: w(hidden, hidden),
            br: bias(),
            wh: w(input, hidden),
            uh: w(hidden, hidden),
            bh: bias(),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = |a, b| Tensor::zeros(&[a, b]).param();
        let bias = || Tensor::zeros(&[hidden]).param();
        Self {
            wz: w(input, hidden),
            uz: w(hidden, hidden),
            bz: bias(),
            wr: w(input, hidden),
            ur: w(hidden, hidden),
            br: bias(),
            wh: w(input, hidden),
            uh: w(hidden, hidden),
            bh: bias(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.wz.shape()[0]
    }
}

/// One GRU step over a block of rows.
pub fn gru_update(tape: &mut Tape, cell: &GruCell<Var>, h_prev: Var, z: Var) -> Result<Var> {
    let expect = tape.shape(cell.wz)[0];
    if tape.shape(z).len() != 2 || tape.shape(z)[1] != expect {
        return Err(IgtError::Shape {
            op: "gru_update",
            shapes: vec![tape.shape(z).to_vec(), tape.shape(cell.wz).to_vec()],
        });
    }
    let gate = |tape: &mut Tape, w: Var, u: Var, b: Var, h: Var| -> Result<Var> {
        let xw = tape.matmul(z, w)?;
        let hu = tape.matmul(h, u)?;
        let s = tape.add(xw, hu)?;
        tape.add(s, b)
    };
    let zp = gate(tape, cell.wz, cell.uz, cell.bz, h_prev)?;
    let update = tape.sigmoid(zp);
    let rp = gate(tape, cell.wr, cell.ur, cell.br, h_prev)?;
    let reset = tape.sigmoid(rp);
    let rh = tape.mul(reset, h_prev)?;
    let np = gate(tape, cell.wh, cell.uh, cell.bh, rh)?;
    let cand = tape.tanh(np);
    // h' = h + z ⊙ (n - h)
    let diff = tape.sub(cand, h_prev)?;
    let step = tape.mul(update, diff)?;
    tape.add(h_prev, step)
}

/// Bipartite propagation over one block. `first` and `second` are the full
/// embedding matrices of the block's two types; returns their propagated
/// slices.
pub fn propagate_layer(
    tape: &mut Tape,
    block: &BipartiteAdj,
    first: Var,
    second: Var,
) -> Result<(Var, Var)> {
    let (s1, s2) = (tape.shape(first).to_vec(), tape.shape(second).to_vec());
    if s1.len() != 2 || s2.len() != 2 || s1[0] != block.n_first || s2[0] != block.n_second {
        return shape_err(
            "propagate_layer",
            &[&[block.n_first, block.n_second], &s1, &s2],
        );
    }
    let stacked = tape.concat(&[first, second], 0)?;
    let out = tape.spmm(Arc::clone(&block.normalized), stacked)?;
    let a = tape.slice(out, 0, 0, block.n_first)?;
    let b = tape.slice(out, 0, block.n_first, block.n_second)?;
    Ok((a, b))
}

/// How a type combines the slices of the blocks it belongs to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Sum,
    /// Sum divided by the number of contributing blocks. Keeps the carried
    /// state from growing geometrically across batches.
    #[default]
    Mean,
}

impl FromStr for Aggregation {
    type Err = IgtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            _ => Err(IgtError::Config(format!("unknown aggregation '{s}'"))),
        }
    }
}

/// Combines a type's propagated slices; `prev` passes through when no block
/// contributed.
pub fn aggregate_types(
    tape: &mut Tape,
    prev: Var,
    contributions: &[Var],
    how: Aggregation,
) -> Result<Var> {
    let Some((&first, rest)) = contributions.split_first() else {
        return Ok(prev);
    };
    let sum = rest.iter().try_fold(first, |acc, &c| tape.add(acc, c))?;
    Ok(match how {
        Aggregation::Mean if !rest.is_empty() => tape.scale(sum, 1.0 / contributions.len() as f64),
        _ => sum,
    })
}

/// Elementwise mean over layer outputs `H^0 .. H^L`.
pub fn aggregate_layers(tape: &mut Tape, layers: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = layers.split_first() else {
        return Err(IgtError::Invalid("no layers to aggregate".into()));
    };
    if rest.is_empty() {
        return Ok(first);
    }
    let sum = rest.iter().try_fold(first, |acc, &c| tape.add(acc, c))?;
    Ok(tape.scale(sum, 1.0 / layers.len() as f64))
}

/// Runs `layers` rounds of propagation and in-layer aggregation, then the
/// cross-layer mean. Returns the pre-GRU embeddings of every node.
pub fn propagate(
    tape: &mut Tape,
    blocks: &[Arc<BipartiteAdj>],
    h0: [Var; 4],
    layers: usize,
    how: Aggregation,
) -> Result<[Var; 4]> {
    let mut history: [Vec<Var>; 4] = h0.map(|v| vec![v]);
    let mut current = h0;
    for _ in 0..layers {
        let mut contrib: [Vec<Var>; 4] = Default::default();
        for block in blocks {
            let (a, b) = block.types;
            let (ya, yb) = propagate_layer(tape, block, current[a.index()], current[b.index()])?;
            contrib[a.index()].push(ya);
            contrib[b.index()].push(yb);
        }
        let mut next = current;
        for k in 0..4 {
            next[k] = aggregate_types(tape, current[k], &contrib[k], how)?;
            history[k].push(next[k]);
        }
        current = next;
    }
    let mut out = current;
    for k in 0..4 {
        out[k] = aggregate_layers(tape, &history[k])?;
    }
    Ok(out)
}

/// Nodes touched by one batch and their raw features.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNodes {
    /// Unique graph indices per type, in first-appearance order.
    pub nodes: [Vec<usize>; 4],
    /// Raw features per type, one row per unique node.
    pub features: [Tensor; 4],
    /// For each order in the batch and each type, the row in `nodes`.
    pub order_rows: [Vec<usize>; 4],
}

/// Full temporal step: propagation over the whole graph, then a GRU update of
/// the batch's nodes. Returns updated embeddings, one row per unique node.
pub fn thegcn_forward(
    tape: &mut Tape,
    blocks: &[Arc<BipartiteAdj>],
    h0: [Var; 4],
    batch: &BatchNodes,
    cells: &[GruCell<Var>; 4],
    layers: usize,
    how: Aggregation,
) -> Result<[Var; 4]> {
    if layers == 0 {
        return Err(IgtError::Invalid(
            "at least one propagation layer is required".into(),
        ));
    }
    let pre = propagate(tape, blocks, h0, layers, how)?;
    let mut out = pre;
    for k in 0..4 {
        let h = tape.gather_rows(pre[k], &batch.nodes[k])?;
        let z = tape.constant(batch.features[k].clone());
        out[k] = gru_update(tape, &cells[k], h, z)?;
    }
    Ok(out)
}
