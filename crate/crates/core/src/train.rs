//! Chronological mini-batch training with early stopping.
//!
//! Each epoch starts the running embedding state from the learnable initial
//! table, then walks the training orders in payment order. A step binds the
//! running state, runs the model, takes an Adam step and writes the GRU
//! outputs back into the running state as plain values. Rows that have not
//! been overwritten yet in the epoch still equal the initial table, so their
//! gradient is routed to it.

use std::ops::Range;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::KvConfig;
use crate::data::{Dataset, ElementType};
use crate::error::{IgtError, Result};
use crate::evaluation::Metrics;
use crate::graph::{BipartiteAdj, HeteroGraph};
use crate::model::{
    mae_loss, prepare_batch, FeatureScaler, Model, ModelConfig, ModelParams, PreparedBatch,
    TargetScale,
};
use crate::optim::{AdamConfig, AdamState};
use crate::split::{chronological_split, Split, SplitSpec};
use crate::tensor::Tensor;
use crate::thegcn::EmbeddingTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch_size: 8192,
            lr: 1e-3,
            max_epochs: 1000,
            patience: 100,
            seed: 0,
            split: SplitSpec {
                validation_days: 10,
                test_days: 15,
            },
        }
    }
}

pub const DEFAULT_GRID_LAYERS: [usize; 5] = [1, 2, 3, 4, 5];
pub const DEFAULT_GRID_DIMS: [usize; 5] = [16, 32, 64, 128, 256];

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "layers",
        "dim",
        "heads",
        "depth",
        "ffn_mult",
        "mode",
        "aggregation",
        "batch_size",
        "lr",
        "max_epochs",
        "patience",
        "seed",
        "validation_days",
        "test_days",
    ];

    /// Overrides defaults with the keys present in `kv`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = Self::default();
        macro_rules! set {
            ($($key:literal => $field:expr),* $(,)?) => {
                $(if let Some(v) = kv.get($key)? { $field = v; })*
            };
        }
        set! {
            "layers" => c.model.layers,
            "dim" => c.model.dim,
            "heads" => c.model.heads,
            "depth" => c.model.depth,
            "ffn_mult" => c.model.ffn_mult,
            "mode" => c.model.mode,
            "aggregation" => c.model.aggregation,
            "batch_size" => c.batch_size,
            "lr" => c.lr,
            "max_epochs" => c.max_epochs,
            "patience" => c.patience,
            "seed" => c.seed,
            "validation_days" => c.split.validation_days,
            "test_days" => c.split.test_days,
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(IgtError::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(IgtError::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }

    /// Rejects `(L, D)` outside the default grid.
    pub fn check_grid_cell(&self) -> Result<()> {
        if !DEFAULT_GRID_LAYERS.contains(&self.model.layers)
            || !DEFAULT_GRID_DIMS.contains(&self.model.dim)
        {
            return Err(IgtError::Config(format!(
                "grid cell L={} D={} outside the default grid",
                self.model.layers, self.model.dim
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Consecutive `size`-order slices of `range`; the last may be short.
pub fn batch_ranges(range: Range<usize>, size: usize) -> Vec<Range<usize>> {
    let size = size.max(1);
    (range.start..range.end)
        .step_by(size)
        .map(|s| s..(s + size).min(range.end))
        .collect()
}

/// Graph, propagation blocks and prepared batches for one evaluation range.
pub struct Phase {
    pub graph: HeteroGraph,
    pub blocks: Vec<Arc<BipartiteAdj>>,
    pub batches: Vec<PreparedBatch>,
}

impl Phase {
    fn new(
        graph: HeteroGraph,
        ds: &Dataset,
        range: Range<usize>,
        model: &Model,
        batch: usize,
    ) -> Result<Self> {
        let uses_graph = model.config.mode.uses_graph();
        let blocks = if uses_graph {
            graph.propagation_blocks()?
        } else {
            Vec::new()
        };
        let batches = batch_ranges(range, batch)
            .into_iter()
            .map(|r| prepare_batch(ds, r, &model.scaler, uses_graph.then_some(&graph.registry)))
            .collect::<Result<_>>()?;
        Ok(Self {
            graph,
            blocks,
            batches,
        })
    }

    /// Training-only adjacency with validation nodes registered edge-free.
    pub fn validation(
        train: &HeteroGraph,
        ds: &Dataset,
        range: Range<usize>,
        model: &Model,
        batch: usize,
    ) -> Result<Self> {
        Self::new(
            train.extend_nodes_only(ds, range.clone()),
            ds,
            range,
            model,
            batch,
        )
    }

    /// Training plus test adjacency.
    pub fn test(
        train: &HeteroGraph,
        ds: &Dataset,
        range: Range<usize>,
        model: &Model,
        batch: usize,
    ) -> Result<Self> {
        Self::new(
            train.extend_for_inference(ds, range.clone()),
            ds,
            range,
            model,
            batch,
        )
    }

    pub fn labels(&self) -> Vec<f64> {
        self.batches
            .iter()
            .flat_map(|b| b.labels.iter().copied())
            .collect()
    }

    pub fn orders(&self) -> Vec<usize> {
        self.batches.iter().flat_map(|b| b.orders.clone()).collect()
    }
}

/// Runs the model over a phase in order, advancing a copy of `state`.
/// Returns predictions and the final state.
pub fn predict(
    model: &Model,
    state: Option<&EmbeddingTable>,
    phase: &Phase,
) -> Result<(Vec<f64>, Option<EmbeddingTable>)> {
    let mut state = state.cloned();
    if let Some(s) = &mut state {
        s.grow(phase.graph.registry.counts());
    }
    let mut preds = Vec::new();
    for batch in &phase.batches {
        let mut tape = Tape::new();
        let bound = model.params.map(&mut |_, t| tape.constant(t.clone()));
        let h0 = state.as_ref().map(|s| {
            let mut it = s.tables.iter();
            [(); 4].map(|_| tape.constant(it.next().expect("four").clone()))
        });
        let fwd = model.forward(&mut tape, &bound, h0, &phase.blocks, batch)?;
        preds.extend_from_slice(tape.value(fwd.pred).data());
        if let (Some(s), Some(upd), Some(nodes)) = (&mut state, fwd.updated, &batch.nodes) {
            for kind in ElementType::ALL {
                let k = kind.index();
                s.write_rows(kind, &nodes.nodes[k], tape.value(upd[k]))?;
            }
        }
    }
    Ok((preds, state))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochLog>,
    /// Per-step training losses, in order.
    pub losses: Vec<f64>,
    pub stopped_early: bool,
    /// Set when a non-finite loss ended training; `best` is then the last
    /// finite checkpoint.
    pub diverged: Option<String>,
    pub seconds_per_epoch: f64,
}

pub struct Trainer<'a> {
    ds: &'a Dataset,
    pub config: TrainConfig,
    pub split: Split,
    pub model: Model,
    /// Learnable initial embeddings.
    pub initial: Option<EmbeddingTable>,
    /// Running state after the most recent step.
    pub state: Option<EmbeddingTable>,
    pristine: [Vec<bool>; 4],
    pub adam: AdamState,
    pub graph: HeteroGraph,
    blocks: Vec<Arc<BipartiteAdj>>,
    batches: Vec<PreparedBatch>,
    validation: Option<Phase>,
    pub epoch: usize,
    pub losses: Vec<f64>,
    visits: Vec<Range<usize>>,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let split = chronological_split(ds, config.split)?;
        Self::with_split(ds, config, split)
    }

    pub fn with_split(ds: &'a Dataset, config: TrainConfig, split: Split) -> Result<Self> {
        config.validate()?;
        if split.train.is_empty() {
            return Err(IgtError::Data("training split is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let raw_widths = ds.schema().widths();
        let labels: Vec<f64> = ds.orders()[split.train.clone()]
            .iter()
            .map(|o| o.delivery_hours)
            .collect();
        let model = Model {
            config: config.model.clone(),
            params: ModelParams::init(&config.model, raw_widths, &mut rng),
            scaler: FeatureScaler::fit(ds, split.train.clone()),
            target: TargetScale::fit(&labels),
            raw_widths,
        };
        let graph = HeteroGraph::build(ds, split.train.clone());
        let uses_graph = config.model.mode.uses_graph();
        let initial = uses_graph
            .then(|| EmbeddingTable::xavier(graph.registry.counts(), config.model.dim, &mut rng));
        let train_phase = Phase::new(
            graph.clone(),
            ds,
            split.train.clone(),
            &model,
            config.batch_size,
        )?;
        let validation = if split.validation.is_empty() {
            None
        } else {
            Some(Phase::validation(
                &graph,
                ds,
                split.validation.clone(),
                &model,
                config.batch_size,
            )?)
        };
        let adam = {
            let mut refs: Vec<&Tensor> = Vec::new();
            let flat = model.params.flatten();
            refs.extend(flat.iter().map(|(_, t)| t));
            if let Some(t) = &initial {
                refs.extend(t.tables.iter());
            }
            AdamState::new(config.adam(), &refs)
        };
        let pristine = graph.registry.counts().map(|n| vec![true; n]);
        Ok(Self {
            ds,
            split,
            model,
            state: initial.clone(),
            initial,
            pristine,
            adam,
            blocks: train_phase.blocks,
            batches: train_phase.batches,
            graph,
            validation,
            config,
            epoch: 0,
            losses: Vec::new(),
            visits: Vec::new(),
        })
    }

    pub fn n_batches(&self) -> usize {
        self.batches.len()
    }

    /// Order ranges visited by the latest epoch, in visiting order.
    pub fn last_visits(&self) -> &[Range<usize>] {
        &self.visits
    }

    fn reset_state(&mut self) {
        self.state = self.initial.clone();
        for p in &mut self.pristine {
            p.fill(true);
        }
    }

    /// One optimizer step on training batch `b`. Returns the batch MAE.
    pub fn step(&mut self, b: usize) -> Result<f64> {
        let batch = &self.batches[b];
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape);
        let h0: Option<[Var; 4]> = self.state.as_ref().map(|s| {
            let mut it = s.tables.iter();
            [(); 4].map(|_| tape.param(it.next().expect("four")))
        });
        let fwd = self
            .model
            .forward(&mut tape, &bound, h0, &self.blocks, batch)?;
        let loss = mae_loss(&mut tape, fwd.pred, &batch.labels)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(IgtError::Divergence(format!(
                "loss {value} at step {}",
                self.losses.len()
            )));
        }
        tape.backward(loss)?;

        let mut vars = Vec::new();
        bound.map(&mut |_, v| vars.push(*v));
        let mut vars = vars.into_iter();
        let mut failed = None;
        self.model.params.visit_mut(&mut |name, t| {
            t.zero_grad();
            let v = vars.next().expect("same walk order");
            let r = match tape.grad(v) {
                Some(g) => t.accumulate_grad(g),
                None => t.accumulate_grad(&vec![0.0; t.numel()]),
            };
            if let Err(e) = r {
                failed.get_or_insert(IgtError::Invalid(format!("{name}: {e}")));
            }
        });
        if let Some(e) = failed {
            return Err(e);
        }
        if let (Some(init), Some(h0)) = (&mut self.initial, h0) {
            #[allow(clippy::needless_range_loop)]
            for k in 0..4 {
                let t = &mut init.tables[k];
                t.zero_grad();
                let d = t.cols();
                let mut g = tape
                    .grad(h0[k])
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec);
                for (row, &fresh) in self.pristine[k].iter().enumerate() {
                    if !fresh {
                        g[row * d..(row + 1) * d].fill(0.0);
                    }
                }
                t.accumulate_grad(&g)?;
            }
        }
        let mut taken = Vec::new();
        self.model.params.visit_mut(&mut |_, t| {
            taken.push(std::mem::replace(t, Tensor::zeros(&[0])));
        });
        let stepped = {
            let mut params: Vec<&mut Tensor> = taken.iter_mut().collect();
            if let Some(init) = &mut self.initial {
                params.extend(init.tables.iter_mut());
            }
            self.adam.step(&mut params)
        };
        let mut back = taken.into_iter();
        self.model
            .params
            .visit_mut(&mut |_, t| *t = back.next().expect("same walk order"));
        stepped?;

        if let (Some(init), Some(state), Some(upd), Some(nodes)) =
            (&self.initial, &mut self.state, fwd.updated, &batch.nodes)
        {
            for kind in ElementType::ALL {
                let k = kind.index();
                let d = init.tables[k].cols();
                let (src, dst) = (init.tables[k].data(), state.tables[k].data_mut());
                for (row, &fresh) in self.pristine[k].iter().enumerate() {
                    if fresh {
                        dst[row * d..(row + 1) * d].copy_from_slice(&src[row * d..(row + 1) * d]);
                    }
                }
                state.write_rows(kind, &nodes.nodes[k], tape.value(upd[k]))?;
                for &n in &nodes.nodes[k] {
                    self.pristine[k][n] = false;
                }
            }
        }
        self.losses.push(value);
        Ok(value)
    }

    /// One pass over the training batches in chronological order. Returns
    /// the order-weighted mean training MAE.
    pub fn train_epoch(&mut self) -> Result<f64> {
        self.reset_state();
        self.visits.clear();
        let (mut total, mut n) = (0.0, 0usize);
        for b in 0..self.batches.len() {
            let r = self.batches[b].orders.clone();
            if let Some(prev) = self.visits.last() {
                let orders = self.ds.orders();
                if r.start != prev.end
                    || orders[r.start].payment_ts < orders[prev.end - 1].payment_ts
                {
                    return Err(IgtError::Invalid(format!(
                        "batch {r:?} visited out of chronological order after {prev:?}"
                    )));
                }
            }
            let loss = self.step(b)?;
            total += loss * r.len() as f64;
            n += r.len();
            self.visits.push(r);
        }
        self.epoch += 1;
        Ok(total / n.max(1) as f64)
    }

    /// Validation MAE from the current running state.
    pub fn validate(&self) -> Result<f64> {
        let phase = self
            .validation
            .as_ref()
            .ok_or_else(|| IgtError::Data("validation split is empty".into()))?;
        let (preds, _) = predict(&self.model, self.state.as_ref(), phase)?;
        crate::evaluation::mae(&phase.labels(), &preds)
    }

    pub fn checkpoint(&self, best_val_mae: f64) -> Checkpoint {
        let mut model = self.model.clone();
        model.params.visit_mut(&mut |_, t| t.zero_grad());
        let strip = |t: &Option<EmbeddingTable>| {
            t.clone().map(|mut t| {
                t.tables.iter_mut().for_each(Tensor::zero_grad);
                t
            })
        };
        Checkpoint {
            config: self.config.clone(),
            model,
            registry: self.graph.registry.clone(),
            initial: strip(&self.initial),
            state: strip(&self.state),
            adam: self.adam.clone(),
            epoch: self.epoch,
            best_val_mae,
        }
    }

    /// Trains until `patience` epochs pass without a strict validation
    /// improvement or `max_epochs` is reached. Epoch 0 is the untrained model.
    pub fn fit(mut self) -> Result<TrainOutcome> {
        let started = Instant::now();
        let mut best_val = self.validate()?;
        let mut best = self.checkpoint(best_val);
        let mut best_epoch = 0;
        let mut history = Vec::new();
        let mut stopped_early = false;
        let mut diverged = None;
        while self.epoch < self.config.max_epochs {
            let t0 = Instant::now();
            let train_mae = match self.train_epoch() {
                Ok(v) => v,
                Err(IgtError::Divergence(msg)) => {
                    diverged = Some(msg);
                    break;
                }
                Err(e) => return Err(e),
            };
            let val_mae = self.validate()?;
            history.push(EpochLog {
                epoch: self.epoch,
                train_mae,
                val_mae,
                seconds: t0.elapsed().as_secs_f64(),
            });
            if val_mae < best_val {
                best_val = val_mae;
                best_epoch = self.epoch;
                best = self.checkpoint(best_val);
            } else if self.epoch - best_epoch >= self.config.patience {
                stopped_early = true;
                break;
            }
        }
        let epochs = history.len().max(1) as f64;
        Ok(TrainOutcome {
            best,
            history,
            losses: self.losses,
            stopped_early,
            diverged,
            seconds_per_epoch: started.elapsed().as_secs_f64() / epochs,
        })
    }
}

/// Rebuilds evaluation phases for a checkpoint and checks that its node
/// registry matches the dataset's training split.
pub struct Evaluator<'a> {
    pub ds: &'a Dataset,
    pub ckpt: &'a Checkpoint,
    pub split: Split,
    pub graph: HeteroGraph,
}

impl<'a> Evaluator<'a> {
    pub fn new(ds: &'a Dataset, ckpt: &'a Checkpoint) -> Result<Self> {
        let split = chronological_split(ds, ckpt.config.split)?;
        let graph = HeteroGraph::build(ds, split.train.clone());
        if graph.registry != ckpt.registry {
            return Err(IgtError::Checkpoint(
                "checkpoint node registry does not match this dataset's training split".into(),
            ));
        }
        if ds.schema().widths() != ckpt.model.raw_widths {
            return Err(IgtError::Checkpoint("feature schema mismatch".into()));
        }
        Ok(Self {
            ds,
            ckpt,
            split,
            graph,
        })
    }

    fn run(&self, phase: Phase) -> Result<(Vec<usize>, Vec<f64>)> {
        let (preds, _) = predict(&self.ckpt.model, self.ckpt.state.as_ref(), &phase)?;
        Ok((phase.orders(), preds))
    }

    pub fn validation(&self) -> Result<(Vec<usize>, Vec<f64>)> {
        let b = self.ckpt.config.batch_size;
        self.run(Phase::validation(
            &self.graph,
            self.ds,
            self.split.validation.clone(),
            &self.ckpt.model,
            b,
        )?)
    }

    pub fn test(&self) -> Result<(Vec<usize>, Vec<f64>)> {
        let b = self.ckpt.config.batch_size;
        self.run(Phase::test(
            &self.graph,
            self.ds,
            self.split.test.clone(),
            &self.ckpt.model,
            b,
        )?)
    }

    pub fn metrics(&self, orders: &[usize], preds: &[f64]) -> Result<Metrics> {
        let y: Vec<f64> = orders
            .iter()
            .map(|&i| self.ds.orders()[i].delivery_hours)
            .collect();
        Metrics::compute(&y, preds)
    }
}

/// Test and validation metrics of one trained configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub layers: usize,
    pub dim: usize,
    pub val_mae: f64,
    pub test: Metrics,
    pub seconds_per_epoch: f64,
}

/// Trains and evaluates one configuration.
pub fn run_cell(ds: &Dataset, config: TrainConfig) -> Result<(CellResult, TrainOutcome)> {
    let (layers, dim) = (config.model.layers, config.model.dim);
    let outcome = Trainer::new(ds, config)?.fit()?;
    if let Some(msg) = &outcome.diverged {
        return Err(IgtError::Divergence(msg.clone()));
    }
    let ev = Evaluator::new(ds, &outcome.best)?;
    let (orders, preds) = ev.test()?;
    let test = ev.metrics(&orders, &preds)?;
    Ok((
        CellResult {
            layers,
            dim,
            val_mae: outcome.best.best_val_mae,
            test,
            seconds_per_epoch: outcome.seconds_per_epoch,
        },
        outcome,
    ))
}

/// One train/evaluate per `(L, D)` pair; failures are kept per cell.
pub fn grid_search(
    ds: &Dataset,
    base: &TrainConfig,
    layers: &[usize],
    dims: &[usize],
) -> Result<Vec<(usize, usize, Result<CellResult>)>> {
    if layers.is_empty() || dims.is_empty() {
        return Err(IgtError::Config("grid axes must be non-empty".into()));
    }
    let mut out = Vec::with_capacity(layers.len() * dims.len());
    for &l in layers {
        for &d in dims {
            let mut cfg = base.clone();
            cfg.model.layers = l;
            cfg.model.dim = d;
            out.push((l, d, run_cell(ds, cfg).map(|(c, _)| c)));
        }
    }
    Ok(out)
}
