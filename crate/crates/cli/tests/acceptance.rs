//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails. Pass criterion numbers as arguments to run a subset.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::cell::OnceCell;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::prop::{
    combine, dense_oracle_error, distances, max_diff, random_h0, sparse_pipeline, HOWS,
};
use common::{dense_normalized, random_graph, raw, vanilla_gcn_layer, Dense};
use igt_core::autodiff::Tape;
use igt_core::baseline::LinearBaseline;
use igt_core::data::{Dataset, ElementType};
use igt_core::evaluation::{
    binned_report, entropy, entropy_by_payment_time, mae, mape, mare, mean_entropy, BinSpec,
};
use igt_core::graph::HeteroGraph;
use igt_core::model::Mode;
use igt_core::split::{chronological_split, Split, SplitSpec};
use igt_core::synth::{generate, SynthConfig};
use igt_core::thegcn::propagate_layer;
use igt_core::train::{
    run_cell, Evaluator, TrainConfig, Trainer, DEFAULT_GRID_DIMS, DEFAULT_GRID_LAYERS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst: (f64, &str) = (0.0, "");
    for &(name, case) in common::grad::CASES {
        let err = case();
        if err.is_nan() || err > worst.0 {
            worst = (err, name);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(
        worst.0 <= 1e-4 && secs < 60.0,
        format!(
            "{} cases, worst relative error {:.2e} ({}), {secs:.1}s",
            common::grad::CASES.len(),
            worst.0,
            worst.1
        ),
    )
}

fn propagation_oracle() -> Outcome {
    let mut pipeline: f64 = 0.0;
    let mut gcn: f64 = 0.0;
    for seed in 0..100 {
        for how in HOWS {
            pipeline = pipeline.max(dense_oracle_error(seed, how));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let g = random_graph(&mut rng, 200);
        let h0 = random_h0(&g, &mut rng);
        for block in g.propagation_blocks().map_err(fail)? {
            let (a, b) = block.types;
            let mut tape = Tape::new();
            let x = tape.constant(h0[a.index()].clone());
            let y = tape.constant(h0[b.index()].clone());
            let (ya, yb) = propagate_layer(&mut tape, &block, x, y).map_err(fail)?;
            let a_hat = dense_normalized(&g, a, b).ok_or("missing dense block")?;
            let stacked =
                Dense::from_tensor(&h0[a.index()]).vstack(&Dense::from_tensor(&h0[b.index()]));
            let expect = vanilla_gcn_layer(&a_hat, &stacked);
            let na = block.n_first;
            gcn = gcn
                .max(expect.rows_range(0, na).max_abs_diff(tape.value(ya)))
                .max(
                    expect
                        .rows_range(na, block.n_second)
                        .max_abs_diff(tape.value(yb)),
                );
        }
    }
    ensure(
        pipeline <= 1e-9 && gcn <= 1e-9,
        format!("100 graphs, pipeline max diff {pipeline:.2e}, vanilla GCN max diff {gcn:.2e}"),
    )
}

fn linear_invariants() -> Outcome {
    let mut superposition: f64 = 0.0;
    let mut locality_violations = 0usize;
    let mut unreached = 0usize;
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let g = random_graph(&mut rng, 120);
        let layers = rng.random_range(1..=3);
        let (alpha, beta) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let x = random_h0(&g, &mut rng);
        let y = random_h0(&g, &mut rng);
        for how in HOWS {
            let lhs = sparse_pipeline(&g, &combine(&x, &y, alpha, beta), layers, how);
            let rhs = combine(
                &sparse_pipeline(&g, &x, layers, how),
                &sparse_pipeline(&g, &y, layers, how),
                alpha,
                beta,
            );
            superposition = superposition.max(max_diff(&lhs, &rhs));
        }
        if seed >= 15 {
            continue;
        }
        let kind = ElementType::ALL[rng.random_range(0..4)];
        let target = rng.random_range(0..g.registry.count(kind));
        let dist = distances(&g, kind, target);
        for how in HOWS {
            let base = sparse_pipeline(&g, &x, layers, how);
            for k in ElementType::ALL {
                for (i, &d) in dist[k.index()].iter().enumerate() {
                    let mut h = x.clone();
                    h[k.index()].row_mut(i)[0] += 1.0;
                    let out = sparse_pipeline(&g, &h, layers, how);
                    let (new, old) = (
                        out[kind.index()].row(target),
                        base[kind.index()].row(target),
                    );
                    if d > layers && new != old {
                        locality_violations += 1;
                    }
                    if d <= layers && new[0] == old[0] {
                        unreached += 1;
                    }
                }
            }
        }
    }
    ensure(
        superposition <= 1e-10 && locality_violations == 0 && unreached == 0,
        format!(
            "superposition max diff {superposition:.2e}, {locality_violations} nodes beyond L hops moved the output, \
             {unreached} nodes within L hops had no effect"
        ),
    )
}

fn normalization_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut blocks = 0;
    let mut check = |g: &HeteroGraph| -> Result<(), String> {
        for block in g.propagation_blocks().map_err(fail)? {
            let root: Vec<f64> = block.degrees.iter().map(|d| d.sqrt()).collect();
            let lhs = block.normalized.matvec(&root);
            worst = lhs
                .iter()
                .zip(&root)
                .map(|(x, y)| (x - y).abs())
                .fold(worst, f64::max);
            blocks += 1;
        }
        Ok(())
    };
    for seed in 0..100 {
        check(&random_graph(
            &mut ChaCha8Rng::seed_from_u64(2000 + seed),
            200,
        ))?;
    }
    for seed in 0..5 {
        let ds = common::small_dataset(seed);
        check(&HeteroGraph::build(&ds, 0..ds.len()))?;
    }
    ensure(
        worst <= 1e-9,
        format!("{blocks} blocks, max deviation {worst:.2e}"),
    )
}

fn overfit() -> Outcome {
    let t = Instant::now();
    let cfg = SynthConfig {
        retailers: 8,
        origins: 10,
        destinations: 40,
        days: 4,
        orders_per_day: 16,
        ..Default::default()
    };
    let ds = generate(&cfg, 0).map_err(fail)?;
    let n = ds.len();
    let split = Split {
        train: 0..n,
        validation: n..n,
        test: n..n,
        train_days: 4,
    };
    let mut tc = TrainConfig {
        batch_size: 64,
        lr: 3e-3,
        max_epochs: 2000,
        ..Default::default()
    };
    tc.model.layers = 2;
    tc.model.dim = 32;
    let mut trainer = Trainer::with_split(&ds, tc, split).map_err(fail)?;
    let mut last = f64::INFINITY;
    let mut steps = 0;
    while steps < 2000 && last >= 0.1 {
        last = trainer.train_epoch().map_err(fail)?;
        steps += trainer.n_batches();
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(
        n == 64 && last < 0.1 && secs < 120.0,
        format!("{n} orders, training MAE {last:.4} h after {steps} steps, {secs:.1}s"),
    )
}

const BENCH_EPOCHS: usize = 25;

struct Bench {
    lr_mae: f64,
    full: f64,
    former: f64,
    graph: f64,
    unseen: Option<(usize, f64)>,
    seen: f64,
    full_secs: f64,
    total_secs: f64,
}

fn bench_config(mode: Mode, spec: SplitSpec) -> TrainConfig {
    let mut tc = TrainConfig {
        batch_size: 1024,
        lr: 1e-3,
        max_epochs: BENCH_EPOCHS,
        patience: 5,
        split: spec,
        ..Default::default()
    };
    tc.model.mode = mode;
    tc
}

fn benchmark() -> Result<Bench, String> {
    let t = Instant::now();
    let sc = SynthConfig {
        late_retailer_fraction: 0.02,
        late_start_day: 35,
        ..Default::default()
    };
    let ds = generate(&sc, 1).map_err(fail)?;
    let spec = SplitSpec {
        validation_days: 5,
        test_days: 10,
    };
    let split = chronological_split(&ds, spec).map_err(fail)?;
    let baseline = LinearBaseline::fit(&ds, split.train.clone(), 1e-3).map_err(fail)?;
    let y: Vec<f64> = ds.orders()[split.test.clone()]
        .iter()
        .map(|o| o.delivery_hours)
        .collect();
    let lr_mae = mae(&y, &baseline.predict(&ds, split.test.clone())).map_err(fail)?;

    let (full, outcome) = run_cell(&ds, bench_config(Mode::Full, spec)).map_err(fail)?;
    let full_secs = t.elapsed().as_secs_f64();
    let ev = Evaluator::new(&ds, &outcome.best).map_err(fail)?;
    let (orders, preds) = ev.test().map_err(fail)?;
    let rep = binned_report(
        &ds,
        split.train.clone(),
        &orders,
        &preds,
        &BinSpec::standard(ElementType::Retailer),
    )
    .map_err(fail)?;
    let unseen = rep.groups[0].metrics.as_ref().map(|m| (m.count, m.mae));
    let (mut seen_abs, mut seen_n) = (0.0, 0usize);
    for g in &rep.groups[1..] {
        if let Some(m) = &g.metrics {
            seen_abs += m.mae * m.count as f64;
            seen_n += m.count;
        }
    }

    let (former, _) = run_cell(&ds, bench_config(Mode::EtaformerOnly, spec)).map_err(fail)?;
    let (graph, _) = run_cell(&ds, bench_config(Mode::ThegcnOnly, spec)).map_err(fail)?;
    Ok(Bench {
        lr_mae,
        full: full.test.mae,
        former: former.test.mae,
        graph: graph.test.mae,
        unseen,
        seen: seen_abs / seen_n.max(1) as f64,
        full_secs,
        total_secs: t.elapsed().as_secs_f64(),
    })
}

fn synthetic_benchmark(b: &Bench) -> Outcome {
    let gain = 1.0 - b.full / b.lr_mae;
    ensure(
        gain >= 0.10 && b.full_secs < 900.0,
        format!(
            "50000 orders, {BENCH_EPOCHS} epochs max: IGT test MAE {:.3} vs linear regression {:.3} ({:.1}% better), {:.0}s",
            b.full,
            b.lr_mae,
            100.0 * gain,
            b.full_secs
        ),
    )
}

fn ablation_ordering(b: &Bench) -> Outcome {
    ensure(
        b.full <= b.former + 0.05 && b.full < b.graph && b.former < b.graph,
        format!(
            "test MAE full {:.3}, ETAformer-only {:.3}, THEGCN-only {:.3}; three runs took {:.0}s",
            b.full, b.former, b.graph, b.total_secs
        ),
    )
}

fn unseen_node_embedding() -> Result<bool, String> {
    let train = vec![
        raw(0, "r1", "o1", "d1", 1_609_664_400, 20.0),
        raw(1, "r2", "o1", "d2", 1_609_668_000, 31.0),
        raw(2, "r1", "o2", "d2", 1_609_671_600, 12.0),
    ];
    let mut all = train;
    all.push(raw(3, "r_new", "o1", "d3", 1_609_750_800, 40.0));
    let ds = Dataset::from_raw(all).map_err(fail)?;
    let g = HeteroGraph::build(&ds, 0..3).extend_for_inference(&ds, 3..4);
    let (r, o) = (ElementType::Retailer, ElementType::Origin);
    let new_r = g.registry.index(r, "r_new").ok_or("r_new missing")?;
    let o1 = g.registry.index(o, "o1").ok_or("o1 missing")?;
    let mut h0 = random_h0(&g, &mut ChaCha8Rng::seed_from_u64(3));
    h0[r.index()].row_mut(new_r).fill(0.0);
    let block = g
        .extract_bipartite(r, o)
        .map_err(fail)?
        .ok_or("no r-o block")?;
    let weight =
        (1.0 / block.degrees[new_r].sqrt()) * (1.0 / block.degrees[block.n_first + o1].sqrt());
    let expect: Vec<f64> = h0[o.index()].row(o1).iter().map(|x| weight * x).collect();
    let mut tape = Tape::new();
    let x = tape.constant(h0[r.index()].clone());
    let y = tape.constant(h0[o.index()].clone());
    let (ya, _) = propagate_layer(&mut tape, &block, x, y).map_err(fail)?;
    Ok(tape.value(ya).row(new_r) == expect.as_slice())
}

fn inductive(b: &Bench) -> Outcome {
    let exact = unseen_node_embedding()?;
    let Some((n, unseen)) = b.unseen else {
        return Err("no unseen-retailer orders in the test split".into());
    };
    ensure(
        exact && unseen.is_finite() && unseen <= 2.0 * b.seen,
        format!(
            "unseen-retailer MAE {unseen:.3} over {n} orders vs seen {:.3} (ratio {:.2}); unseen node embedding exact: {exact}",
            b.seen,
            unseen / b.seen
        ),
    )
}

fn entropy_error() -> Outcome {
    let mut rows = Vec::new();
    for sigma in [0.5, 4.0] {
        let cfg = SynthConfig {
            sigma,
            days: 20,
            orders_per_day: 500,
            ..Default::default()
        };
        let ds = generate(&cfg, 5).map_err(fail)?;
        let hours: Vec<usize> = ds.orders().iter().map(|o| o.hour()).collect();
        let h = mean_entropy(&entropy_by_payment_time(&hours, &ds.labels()).map_err(fail)?)
            .ok_or("no entropy")?;
        let spec = SplitSpec {
            validation_days: 2,
            test_days: 4,
        };
        let mut tc = bench_config(Mode::Full, spec);
        tc.max_epochs = 10;
        let (cell, _) = run_cell(&ds, tc).map_err(fail)?;
        rows.push((sigma, h, cell.test.mae));
    }
    let (lo, hi) = (rows[0], rows[1]);
    ensure(
        lo.1 < hi.1 && lo.2 < hi.2,
        format!(
            "sigma {}: entropy {:.3} nats, test MAE {:.3}; sigma {}: entropy {:.3} nats, test MAE {:.3}",
            lo.0, lo.1, lo.2, hi.0, hi.1, hi.2
        ),
    )
}

fn metric_examples() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let m = |r: igt_core::Result<f64>| r.unwrap_or(f64::NAN);
    let examples = [
        close(m(mae(&[10.0], &[13.0])), 3.0),
        close(m(mae(&[2.0, 4.0, 6.0], &[3.0, 3.0, 9.0])), 5.0 / 3.0),
        close(m(mape(&[2.0, 4.0], &[1.0, 5.0])), 0.375),
        close(m(mare(&[2.0, 4.0], &[1.0, 5.0])), 1.0 / 3.0),
        close(entropy(&[7]), 0.0),
        close(entropy(&[3, 3, 3, 3]), 4f64.ln()),
        close(entropy(&[2, 1, 1]), 1.5 * 2f64.ln()),
    ];
    let passed = examples.iter().filter(|&&ok| ok).count();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut identity: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..50);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..200.0)).collect();
        let p: Vec<f64> = y
            .iter()
            .map(|v| v + rng.random_range(-50.0..50.0))
            .collect();
        let mean = y.iter().sum::<f64>() / n as f64;
        identity = identity.max((m(mare(&y, &p)) - m(mae(&y, &p)) / mean).abs());
    }
    ensure(
        passed == examples.len() && identity <= 1e-12,
        format!(
            "{passed}/{} hand examples, MARE vs MAE/mean max diff {identity:.2e} over 1000 cases",
            examples.len()
        ),
    )
}

fn protocol() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let cells = grid_cells(dir.path())?;
    let expect: Vec<(usize, usize)> = DEFAULT_GRID_LAYERS
        .iter()
        .flat_map(|&l| DEFAULT_GRID_DIMS.iter().map(move |&d| (l, d)))
        .collect();

    let defaults = TrainConfig::default();
    let defaults_ok =
        (defaults.batch_size, defaults.patience, defaults.max_epochs) == (8192, 100, 1000);

    let big = generate(
        &SynthConfig {
            days: 12,
            orders_per_day: 1000,
            ..Default::default()
        },
        3,
    )
    .map_err(fail)?;
    let mut tc = common::small_config(Mode::EtaformerOnly);
    tc.batch_size = 8192;
    tc.split = SplitSpec {
        validation_days: 1,
        test_days: 1,
    };
    let mut trainer = Trainer::new(&big, tc).map_err(fail)?;
    trainer.train_epoch().map_err(fail)?;
    let sizes: Vec<usize> = trainer.last_visits().iter().map(|r| r.len()).collect();
    let train_n = trainer.split.train.len();
    let batches_ok = train_n > 8192 && sizes == [8192, train_n - 8192];

    let ds = common::small_dataset(4);
    let mut tc = common::small_config(Mode::Full);
    tc.lr = 0.0;
    tc.patience = 100;
    tc.max_epochs = 1000;
    let out = Trainer::new(&ds, tc).and_then(Trainer::fit).map_err(fail)?;
    let last = out.history.last().map_or(0, |h| h.epoch);
    let patience_ok = out.stopped_early && last == out.best.epoch + 100;

    let tiny = generate(
        &SynthConfig {
            retailers: 5,
            origins: 5,
            destinations: 20,
            days: 5,
            orders_per_day: 12,
            ..Default::default()
        },
        2,
    )
    .map_err(fail)?;
    let mut tc = common::small_config(Mode::Full);
    tc.split = SplitSpec {
        validation_days: 1,
        test_days: 1,
    };
    tc.lr = 1e-4;
    tc.patience = 1000;
    tc.max_epochs = 1000;
    let capped = Trainer::new(&tiny, tc)
        .and_then(Trainer::fit)
        .map_err(fail)?;
    let cap_ok = capped.history.len() == 1000 && !capped.stopped_early;

    ensure(
        cells == expect && defaults_ok && batches_ok && patience_ok && cap_ok,
        format!(
            "grid emitted {} cells; defaults 8192/100/1000: {defaults_ok}; batches {sizes:?} of {train_n} train orders; \
             lr 0 run stopped at epoch {last} (best {}); capped run trained {} epochs",
            cells.len(),
            out.best.epoch,
            capped.history.len()
        ),
    )
}

fn grid_cells(dir: &Path) -> Result<Vec<(usize, usize)>, String> {
    let igt = env!("CARGO_BIN_EXE_igt");
    let synth = dir.join("synth.cfg");
    std::fs::write(
        &synth,
        "retailers = 10\norigins = 8\ndestinations = 40\ndays = 6\norders_per_day = 20\n",
    )
    .map_err(fail)?;
    let train = dir.join("train.cfg");
    std::fs::write(&train, "heads = 2\ndepth = 1\nbatch_size = 64\nmax_epochs = 1\nvalidation_days = 1\ntest_days = 1\n")
        .map_err(fail)?;
    let run = |cmd: &mut Command| -> Result<(), String> {
        let out = cmd.output().map_err(fail)?;
        ensure(
            out.status.success(),
            String::from_utf8_lossy(&out.stderr).into_owned(),
        )
        .map(drop)
    };
    run(Command::new(igt)
        .arg("gen-data")
        .arg("--config")
        .arg(&synth)
        .arg("--out-dir")
        .arg(dir))?;
    run(Command::new(igt)
        .arg("grid")
        .arg("--data")
        .arg(dir.join("orders.csv"))
        .arg("--config")
        .arg(&train)
        .arg("--out-dir")
        .arg(dir.join("grid")))?;
    let csv = std::fs::read_to_string(dir.join("grid/grid.csv")).map_err(fail)?;
    let mut cells = Vec::new();
    for line in csv.lines().skip(1) {
        let mut f = line.split(',');
        let l = f.next().and_then(|v| v.parse().ok()).ok_or(line)?;
        let d = f.next().and_then(|v| v.parse().ok()).ok_or(line)?;
        if line.contains("NaN") {
            return Err(format!("cell L={l} D={d} failed"));
        }
        cells.push((l, d));
    }
    Ok(cells)
}

fn main() {
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let bench: OnceCell<Result<Bench, String>> = OnceCell::new();
    let with_bench = |f: fn(&Bench) -> Outcome| -> Outcome {
        match bench.get_or_init(benchmark) {
            Ok(b) => f(b),
            Err(e) => Err(format!("benchmark failed: {e}")),
        }
    };
    let criteria: [(usize, &str, &dyn Fn() -> Outcome); 11] = [
        (1, "gradient correctness", &gradients),
        (2, "propagation oracle", &propagation_oracle),
        (3, "linear-operator invariants", &linear_invariants),
        (4, "normalization identity", &normalization_identity),
        (5, "overfit capacity", &overfit),
        (6, "synthetic benchmark", &|| {
            with_bench(synthetic_benchmark)
        }),
        (7, "ablation ordering", &|| with_bench(ablation_ordering)),
        (8, "entropy-error correlation", &entropy_error),
        (9, "inductive behavior", &|| with_bench(inductive)),
        (10, "metric unit tests", &metric_examples),
        (11, "protocol fidelity", &protocol),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
