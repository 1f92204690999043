#![allow(dead_code)]

pub mod grad;
pub mod prop;

use igt_core::autodiff::{Tape, Var};
use igt_core::data::{Dataset, ElementType, RawOrder};
use igt_core::graph::HeteroGraph;
use igt_core::thegcn::Aggregation;
use igt_core::Tensor;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_FLOOR: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-6)` over one tensor. The floor keeps
/// identically-zero gradients (such as the key bias under softmax) from
/// turning finite-difference noise into a relative error of one.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let a: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / (a + n).max(GRAD_FLOOR)
}

/// Central-difference check of `f`: relative error over the concatenated
/// gradient of every input tensor.
pub fn gradcheck(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let (a, n) = gradients(inputs, f);
    relative_error(&a.concat(), &n.concat())
}

/// Relative error per input tensor.
pub fn gradcheck_each(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> Vec<f64> {
    let (a, n) = gradients(inputs, f);
    a.iter()
        .zip(&n)
        .map(|(a, n)| relative_error(a, n))
        .collect()
}

/// Analytic and central-difference gradients of `f` per input.
pub fn gradients(
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();
    let eval = |ts: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
        let l = f(&mut tape, &vars);
        tape.value(l).item()
    };
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let g = (0..inputs[i].numel())
            .map(|j| {
                let x = work[i].data()[j];
                work[i].data_mut()[j] = x + FD_STEP;
                let up = eval(&work);
                work[i].data_mut()[j] = x - FD_STEP;
                let down = eval(&work);
                work[i].data_mut()[j] = x;
                (up - down) / (2.0 * FD_STEP)
            })
            .collect();
        numeric.push(g);
    }
    (analytic, numeric)
}

/// Random-weighted sum of `y`: a smooth scalar that exercises every output.
pub fn probe(tape: &mut Tape, y: Var, seed: u64) -> Var {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(
        &shape,
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn raw(id: usize, r: &str, o: &str, d: &str, ts: i64, hours: f64) -> RawOrder {
    RawOrder {
        order_id: format!("x{id}"),
        retailer_id: r.into(),
        origin_id: o.into(),
        destination_id: d.into(),
        payment_ts: ts,
        delivery_hours: hours,
        origin_coord: (116.0 + id as f64 * 0.1, 30.0),
        dest_coord: (116.5, 30.0 + id as f64 * 0.2),
    }
}

/// Two orders sharing a retailer, paid an hour apart.
pub fn two_order_dataset() -> Dataset {
    Dataset::from_raw(vec![
        raw(0, "r1", "o1", "d1", 1_609_664_400, 20.0),
        raw(1, "r1", "o2", "d2", 1_609_668_000, 31.0),
    ])
    .unwrap()
}

/// Random typed graph with at most `max_nodes` nodes and edges over all six
/// type pairs.
pub fn random_graph<R: Rng>(rng: &mut R, max_nodes: usize) -> HeteroGraph {
    let mut g = HeteroGraph::default();
    let total = rng.random_range(4..=max_nodes);
    let mut counts = [1usize; 4];
    for _ in 4..total {
        counts[rng.random_range(0..4)] += 1;
    }
    for kind in ElementType::ALL {
        for i in 0..counts[kind.index()] {
            g.registry.register(kind, &format!("{kind}{i}"));
        }
    }
    let density: f64 = rng.random_range(0.005..0.1);
    for (a, b) in igt_core::graph::all_pairs() {
        if rng.random_bool(0.2) {
            continue;
        }
        for u in 0..counts[a.index()] {
            for v in 0..counts[b.index()] {
                if rng.random_bool(density) {
                    g.add_edge(a, u, b, v);
                }
            }
        }
    }
    g
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().to_vec(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn matmul(&self, other: &Dense) -> Dense {
        let mut out = Dense::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.at(k, j);
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Dense) -> Dense {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Dense {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, s: f64) -> Dense {
        Dense {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn vstack(&self, other: &Dense) -> Dense {
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Dense {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn rows_range(&self, start: usize, len: usize) -> Dense {
        Dense {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    pub fn max_abs_diff(&self, t: &Tensor) -> f64 {
        assert_eq!((self.rows, self.cols), (t.rows(), t.cols()));
        self.data
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `D̂^{-1/2} (A + I) D̂^{-1/2}` of the bipartite subgraph on `(a, b)`, built
/// entry by entry from the edge list.
pub fn dense_normalized(g: &HeteroGraph, a: ElementType, b: ElementType) -> Option<Dense> {
    let edges = g.edges_between(a, b).unwrap();
    if edges.is_empty() {
        return None;
    }
    let (na, nb) = (g.registry.count(a), g.registry.count(b));
    let n = na + nb;
    let mut adj = Dense::zeros(n, n);
    for i in 0..n {
        adj.set(i, i, 1.0);
    }
    for (u, v) in edges {
        adj.set(u, na + v, 1.0);
        adj.set(na + v, u, 1.0);
    }
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| adj.at(i, j)).sum()).collect();
    let mut out = Dense::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, adj.at(i, j) / (deg[i] * deg[j]).sqrt());
        }
    }
    Some(out)
}

/// Dense reference for propagation, per-type aggregation and the layer mean.
pub fn dense_pipeline(
    g: &HeteroGraph,
    h0: &[Dense; 4],
    layers: usize,
    how: Aggregation,
) -> [Dense; 4] {
    let mut blocks = Vec::new();
    for (a, b) in igt_core::graph::all_pairs() {
        if let Some(m) = dense_normalized(g, a, b) {
            blocks.push((a, b, m));
        }
    }
    let mut current = h0.clone();
    let mut sums = h0.clone();
    for _ in 0..layers {
        let mut acc: [Option<Dense>; 4] = Default::default();
        let mut n_contrib = [0usize; 4];
        for (a, b, m) in &blocks {
            let stacked = current[a.index()].vstack(&current[b.index()]);
            let out = m.matmul(&stacked);
            let na = current[a.index()].rows;
            let parts = [
                (a, out.rows_range(0, na)),
                (b, out.rows_range(na, out.rows - na)),
            ];
            for (t, part) in parts {
                let k = t.index();
                n_contrib[k] += 1;
                acc[k] = Some(match acc[k].take() {
                    Some(x) => x.add(&part),
                    None => part,
                });
            }
        }
        for k in 0..4 {
            if let Some(x) = acc[k].take() {
                current[k] = match how {
                    Aggregation::Sum => x,
                    Aggregation::Mean => x.scale(1.0 / n_contrib[k] as f64),
                };
            }
            sums[k] = sums[k].add(&current[k]);
        }
    }
    sums.map(|s| s.scale(1.0 / (layers + 1) as f64))
}

/// One vanilla GCN layer `σ(Â H W)` with `W = I` and `σ` the identity.
pub fn vanilla_gcn_layer(a_hat: &Dense, h: &Dense) -> Dense {
    let w = {
        let mut w = Dense::zeros(h.cols, h.cols);
        for i in 0..h.cols {
            w.set(i, i, 1.0);
        }
        w
    };
    a_hat.matmul(h).matmul(&w)
}

/// Finite-difference check of the whole model (graph, GRUs, transformer and
/// heads) under the training loss on [`two_order_dataset`].
pub fn composed_error(mode: igt_core::model::Mode) -> f64 {
    use igt_core::model::{
        mae_loss, prepare_batch, FeatureScaler, Model, ModelConfig, ModelParams, TargetScale,
    };
    use igt_core::thegcn::EmbeddingTable;
    use rand::SeedableRng;

    let ds = two_order_dataset();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let config = ModelConfig {
        layers: 2,
        dim: 4,
        heads: 2,
        depth: 2,
        ffn_mult: 2,
        mode,
        aggregation: Aggregation::Mean,
    };
    let widths = ds.schema().widths();
    let model = Model {
        params: ModelParams::init(&config, widths, &mut rng),
        config,
        scaler: FeatureScaler::fit(&ds, 0..2),
        target: TargetScale::fit(&ds.labels()),
        raw_widths: widths,
    };
    let graph = HeteroGraph::build(&ds, 0..2);
    let blocks = graph.propagation_blocks().unwrap();
    let batch = prepare_batch(&ds, 0..2, &model.scaler, Some(&graph.registry)).unwrap();
    let table = EmbeddingTable::xavier(graph.registry.counts(), 4, &mut rng);
    let mut inputs: Vec<Tensor> = model.params.flatten().into_iter().map(|(_, t)| t).collect();
    let n_params = inputs.len();
    if mode.uses_graph() {
        inputs.extend(table.tables.iter().cloned());
    }
    gradcheck(&inputs, &|tape, vars| {
        let mut it = vars[..n_params].iter().copied();
        let bound = model.params.map(&mut |_, _| it.next().unwrap());
        let h0 = mode.uses_graph().then(|| {
            [
                vars[n_params],
                vars[n_params + 1],
                vars[n_params + 2],
                vars[n_params + 3],
            ]
        });
        let fwd = model.forward(tape, &bound, h0, &blocks, &batch).unwrap();
        mae_loss(tape, fwd.pred, &batch.labels).unwrap()
    })
}

/// Small synthetic world: 12 days of 60 orders.
pub fn small_dataset(seed: u64) -> Dataset {
    let cfg = igt_core::synth::SynthConfig {
        retailers: 20,
        origins: 15,
        destinations: 120,
        days: 12,
        orders_per_day: 60,
        ..Default::default()
    };
    igt_core::synth::generate(&cfg, seed).unwrap()
}

/// Compact model and optimizer settings for `small_dataset`.
pub fn small_config(mode: igt_core::model::Mode) -> igt_core::train::TrainConfig {
    let mut c = igt_core::train::TrainConfig::default();
    c.model.layers = 2;
    c.model.dim = 8;
    c.model.heads = 2;
    c.model.depth = 1;
    c.model.mode = mode;
    c.batch_size = 96;
    c.lr = 3e-3;
    c.max_epochs = 3;
    c.patience = 2;
    c.split = igt_core::split::SplitSpec {
        validation_days: 2,
        test_days: 2,
    };
    c
}
