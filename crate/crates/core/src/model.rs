//! The composed predictor and its ablations.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, ElementType};
use crate::error::{IgtError, Result};
use crate::etaformer::{align_batch, aligned_width, positional_encoding, EtaFormer, SEQ_LEN};
use crate::graph::{BipartiteAdj, NodeRegistry};
use crate::params::Linear;
use crate::tensor::Tensor;
use crate::thegcn::{thegcn_forward, Aggregation, BatchNodes, GruCell};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    ThegcnOnly,
    EtaformerOnly,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::ThegcnOnly, Mode::EtaformerOnly];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::ThegcnOnly => "thegcn_only",
            Mode::EtaformerOnly => "etaformer_only",
        }
    }

    pub fn uses_graph(self) -> bool {
        self != Mode::EtaformerOnly
    }

    pub fn uses_former(self) -> bool {
        self != Mode::ThegcnOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = IgtError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| IgtError::Config(format!("unknown mode '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_mult: usize,
    pub mode: Mode,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 32,
            heads: 4,
            depth: 2,
            ffn_mult: 2,
            mode: Mode::Full,
            aggregation: Aggregation::Mean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode.uses_graph() && (self.layers == 0 || self.dim == 0) {
            return Err(IgtError::Config("layers and dim must be positive".into()));
        }
        if self.mode.uses_former() && (self.heads == 0 || self.depth == 0 || self.ffn_mult == 0) {
            return Err(IgtError::Config(
                "heads, depth and ffn_mult must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Aligned row width for the transformer.
    pub fn width(&self, raw_widths: [usize; 4]) -> usize {
        let d = if self.mode.uses_graph() { self.dim } else { 0 };
        aligned_width(raw_widths, d, self.heads.max(1))
    }
}

/// Per-type column standardization fitted on training orders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: [Vec<f64>; 4],
    pub std: [Vec<f64>; 4],
}

impl FeatureScaler {
    pub fn fit(ds: &Dataset, orders: Range<usize>) -> Self {
        let widths = ds.schema().widths();
        let n = orders.len().max(1) as f64;
        let mut mean: [Vec<f64>; 4] = widths.map(|w| vec![0.0; w]);
        let mut sq: [Vec<f64>; 4] = widths.map(|w| vec![0.0; w]);
        for i in orders {
            for kind in ElementType::ALL {
                let k = kind.index();
                for (c, &v) in ds.order_features(kind, i).iter().enumerate() {
                    mean[k][c] += v;
                    sq[k][c] += v * v;
                }
            }
        }
        let mut std = sq;
        for k in 0..4 {
            for c in 0..widths[k] {
                mean[k][c] /= n;
                let var = (std[k][c] / n - mean[k][c] * mean[k][c]).max(0.0);
                std[k][c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, kind: ElementType, raw: &[f64], out: &mut Vec<f64>) {
        let k = kind.index();
        out.extend(
            raw.iter()
                .enumerate()
                .map(|(c, v)| (v - self.mean[k][c]) / self.std[k][c]),
        );
    }
}

/// Affine map from network output to hours.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub shift: f64,
    pub scale: f64,
}

impl TargetScale {
    pub fn fit(labels: &[f64]) -> Self {
        if labels.is_empty() {
            return Self {
                shift: 0.0,
                scale: 1.0,
            };
        }
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let var = labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        Self {
            shift: mean,
            scale: if var > 1e-12 { var.sqrt() } else { 1.0 },
        }
    }
}

/// Trainable weights; which groups exist depends on the mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub gru: Option<[GruCell<T>; 4]>,
    pub former: Option<EtaFormer<T>>,
    pub gcn_head: Option<Linear<T>>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            gru: self.gru.as_ref().map(|cells| {
                let mut it = cells.iter().zip(ElementType::ALL);
                std::array::from_fn(|_| {
                    let (c, kind) = it.next().expect("four cells");
                    c.map(&format!("gru.{kind}"), f)
                })
            }),
            former: self.former.as_ref().map(|m| m.map("former", f)),
            gcn_head: self.gcn_head.as_ref().map(|h| h.map("gcn_head", f)),
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        if let Some(cells) = &mut self.gru {
            for (c, kind) in cells.iter_mut().zip(ElementType::ALL) {
                c.visit_mut(&format!("gru.{kind}"), f);
            }
        }
        if let Some(m) = &mut self.former {
            m.visit_mut("former", f);
        }
        if let Some(h) = &mut self.gcn_head {
            h.visit_mut("gcn_head", f);
        }
    }

    /// Values in canonical order.
    pub fn flatten(&self) -> Vec<(String, T)>
    where
        T: Clone,
    {
        let mut out = Vec::new();
        self.map(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, raw_widths: [usize; 4], rng: &mut R) -> Self {
        let gru = cfg.mode.uses_graph().then(|| {
            let mut k = 0;
            [(); 4].map(|_| {
                k += 1;
                GruCell::xavier(raw_widths[k - 1], cfg.dim, rng)
            })
        });
        let former = cfg
            .mode
            .uses_former()
            .then(|| EtaFormer::xavier(cfg.width(raw_widths), cfg.depth, cfg.ffn_mult, rng));
        let gcn_head = (cfg.mode == Mode::ThegcnOnly).then(|| Linear::xavier(4 * cfg.dim, 1, rng));
        Self {
            gru,
            former,
            gcn_head,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(&mut |_, t| tape.param(t))
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.map(&mut |_, t| n += t.numel());
        n
    }
}

/// Inputs for one batch of orders.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub orders: Range<usize>,
    /// Standardized raw features per type, one row per order.
    pub z: [Tensor; 4],
    pub nodes: Option<BatchNodes>,
    pub labels: Vec<f64>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Builds a batch. Every order's elements must be in `registry` when graph
/// nodes are wanted.
pub fn prepare_batch(
    ds: &Dataset,
    orders: Range<usize>,
    scaler: &FeatureScaler,
    registry: Option<&NodeRegistry>,
) -> Result<PreparedBatch> {
    let widths = ds.schema().widths();
    let b = orders.len();
    let mut z: [Vec<f64>; 4] = widths.map(|w| Vec::with_capacity(b * w));
    for i in orders.clone() {
        for kind in ElementType::ALL {
            scaler.apply(kind, ds.order_features(kind, i), &mut z[kind.index()]);
        }
    }
    let z: [Tensor; 4] = {
        let mut it = z.into_iter().zip(widths);
        std::array::from_fn(|_| {
            let (d, w) = it.next().expect("four types");
            Tensor::new(&[b, w], d).expect("sized above")
        })
    };
    let nodes = match registry {
        None => None,
        Some(reg) => Some(batch_nodes(ds, orders.clone(), reg, &z)?),
    };
    let labels = ds.orders()[orders.clone()]
        .iter()
        .map(|o| o.delivery_hours)
        .collect();
    Ok(PreparedBatch {
        orders,
        z,
        nodes,
        labels,
    })
}

fn batch_nodes(
    ds: &Dataset,
    orders: Range<usize>,
    reg: &NodeRegistry,
    z: &[Tensor; 4],
) -> Result<BatchNodes> {
    let mut nodes: [Vec<usize>; 4] = Default::default();
    let mut order_rows: [Vec<usize>; 4] = Default::default();
    let mut last: [Vec<usize>; 4] = Default::default();
    let mut seen: [std::collections::HashMap<usize, usize>; 4] = Default::default();
    for (pos, i) in orders.enumerate() {
        let ids = reg.order_nodes(ds, i);
        for kind in ElementType::ALL {
            let k = kind.index();
            let node = ids[k].ok_or_else(|| {
                IgtError::Invalid(format!("order {i}: {kind} node missing from the graph"))
            })?;
            let row = *seen[k].entry(node).or_insert_with(|| {
                nodes[k].push(node);
                last[k].push(pos);
                nodes[k].len() - 1
            });
            last[k][row] = pos;
            order_rows[k].push(row);
        }
    }
    let features = std::array::from_fn(|k| {
        let w = z[k].cols();
        let mut data = Vec::with_capacity(last[k].len() * w);
        for &pos in &last[k] {
            data.extend_from_slice(z[k].row(pos));
        }
        Tensor::new(&[last[k].len(), w], data).expect("sized above")
    });
    Ok(BatchNodes {
        nodes,
        features,
        order_rows,
    })
}

/// Forward outputs of one batch.
pub struct Forward {
    /// Predicted hours, shape `[B]`.
    pub pred: Var,
    /// GRU outputs for the batch's unique nodes, per type.
    pub updated: Option<[Var; 4]>,
}

/// Model structure plus fitted preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub scaler: FeatureScaler,
    pub target: TargetScale,
    pub raw_widths: [usize; 4],
}

impl Model {
    pub fn width(&self) -> usize {
        self.config.width(self.raw_widths)
    }

    pub fn positional(&self) -> Tensor {
        positional_encoding(SEQ_LEN, self.width())
    }

    /// `h0` must be bound table rows when the mode uses the graph.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &ModelParams<Var>,
        h0: Option<[Var; 4]>,
        blocks: &[Arc<BipartiteAdj>],
        batch: &PreparedBatch,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let n = batch.len();
        let mut updated = None;
        let mut per_order = None;
        if cfg.mode.uses_graph() {
            let (Some(h0), Some(nodes), Some(cells)) = (h0, &batch.nodes, &bound.gru) else {
                return Err(IgtError::Invalid(
                    "graph mode needs embeddings and batch nodes".into(),
                ));
            };
            let upd = thegcn_forward(tape, blocks, h0, nodes, cells, cfg.layers, cfg.aggregation)?;
            let mut rows = upd;
            for k in 0..4 {
                rows[k] = tape.gather_rows(upd[k], &nodes.order_rows[k])?;
            }
            updated = Some(upd);
            per_order = Some(rows);
        }
        let raw = match cfg.mode {
            Mode::ThegcnOnly => {
                let head = bound.gcn_head.as_ref().expect("thegcn_only head");
                let cat = tape.concat(&per_order.expect("graph rows"), 1)?;
                let y = head.forward(tape, cat)?;
                tape.reshape(y, &[n])?
            }
            _ => {
                let former = bound.former.as_ref().expect("transformer weights");
                let z = {
                    let mut it = batch.z.iter();
                    [(); 4].map(|_| tape.constant(it.next().expect("four").clone()))
                };
                let x = align_batch(tape, z, per_order, self.width())?;
                let pe = tape.constant(self.positional());
                former.forward(tape, x, pe, cfg.heads)?
            }
        };
        let scaled = tape.scale(raw, self.target.scale);
        let shift = tape.constant(Tensor::scalar(self.target.shift));
        let pred = tape.add(scaled, shift)?;
        if !tape.value(pred).is_finite() {
            return Err(IgtError::Divergence(format!(
                "non-finite prediction in batch of orders {:?}",
                batch.orders
            )));
        }
        Ok(Forward { pred, updated })
    }
}

/// Mean absolute error on the tape.
pub fn mae_loss(tape: &mut Tape, pred: Var, labels: &[f64]) -> Result<Var> {
    if labels.is_empty() {
        return Err(IgtError::Invalid("loss over an empty batch".into()));
    }
    let y = tape.constant(Tensor::new(&[labels.len()], labels.to_vec())?);
    let d = tape.sub(pred, y)?;
    let a = tape.abs(d);
    tape.mean(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_loss_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(&[3], vec![3.0, 3.0, 9.0]).unwrap());
        let l = mae_loss(&mut tape, p, &[2.0, 4.0, 6.0]).unwrap();
        assert!((tape.value(l).item() - 5.0 / 3.0).abs() < 1e-12);
        let p = tape.constant(Tensor::new(&[1], vec![13.0]).unwrap());
        let l = mae_loss(&mut tape, p, &[10.0]).unwrap();
        assert_eq!(tape.value(l).item(), 3.0);
        assert!(mae_loss(&mut tape, p, &[]).is_err());
    }

    #[test]
    fn mode_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("both".parse::<Mode>().is_err());
    }

    #[test]
    fn target_scale_handles_constant_labels() {
        let t = TargetScale::fit(&[5.0, 5.0]);
        assert_eq!((t.shift, t.scale), (5.0, 1.0));
    }
}
