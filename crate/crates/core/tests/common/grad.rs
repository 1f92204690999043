//! Finite-difference cases for every primitive and sub-network. Each case
//! returns its largest relative error.

use std::sync::Arc;

use igt_core::autodiff::{Tape, Var};
use igt_core::etaformer::{positional_encoding, EtaFormer, SEQ_LEN};
use igt_core::kernels::Csr;
use igt_core::model::Mode;
use igt_core::params::Linear;
use igt_core::thegcn::{gru_update, GruCell};
use igt_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, probe, random_tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matmul_and_bmm() -> f64 {
    let mut r = rng(1);
    let a = random_tensor(&[3, 4], &mut r);
    let b = random_tensor(&[4, 2], &mut r);
    let mut err = gradcheck(&[a, b], &|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        probe(t, y, 1)
    });
    let x = random_tensor(&[2, 3, 4], &mut r);
    let w = random_tensor(&[4, 5], &mut r);
    err = err.max(gradcheck(&[x, w], &|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        probe(t, y, 2)
    }));
    let p = random_tensor(&[2, 3, 4], &mut r);
    let q = random_tensor(&[2, 5, 4], &mut r);
    err = err.max(gradcheck(&[p.clone(), q], &|t, v| {
        let y = t.bmm(v[0], v[1], true).unwrap();
        probe(t, y, 3)
    }));
    let s = random_tensor(&[2, 4, 3], &mut r);
    err.max(gradcheck(&[p, s], &|t, v| {
        let y = t.bmm(v[0], v[1], false).unwrap();
        probe(t, y, 4)
    }))
}

pub fn broadcast_arithmetic() -> f64 {
    let mut r = rng(2);
    let a = random_tensor(&[3, 4], &mut r);
    let b = random_tensor(&[4], &mut r);
    let mut err: f64 = 0.0;
    for op in 0..3 {
        err = err.max(gradcheck(&[a.clone(), b.clone()], &|t, v| {
            let y = match op {
                0 => t.add(v[0], v[1]),
                1 => t.sub(v[0], v[1]),
                _ => t.mul(v[0], v[1]),
            }
            .unwrap();
            probe(t, y, 5)
        }));
    }
    err.max(gradcheck(&[a], &|t, v| {
        let y = t.scale(v[0], -2.5);
        probe(t, y, 6)
    }))
}

pub fn concat_slice_reshape_swap() -> f64 {
    let mut r = rng(3);
    let a = random_tensor(&[2, 3, 4], &mut r);
    let b = random_tensor(&[2, 2, 4], &mut r);
    let err = gradcheck(&[a.clone(), b], &|t, v| {
        let c = t.concat(&[v[0], v[1]], 1).unwrap();
        let s = t.slice(c, 1, 1, 3).unwrap();
        let s = t.reshape(s, &[2, 3, 2, 2]).unwrap();
        let s = t.swap_axes12(s).unwrap();
        probe(t, s, 7)
    });
    let c = random_tensor(&[2, 3, 1], &mut r);
    err.max(gradcheck(&[a, c], &|t, v| {
        let y = t.concat(&[v[0], v[1]], 2).unwrap();
        probe(t, y, 8)
    }))
}

pub fn reductions_and_activations() -> f64 {
    let x = random_tensor(&[3, 5], &mut rng(4));
    let mut err = gradcheck(std::slice::from_ref(&x), &|t, v| {
        let s = t.sigmoid(v[0]);
        let h = t.tanh(s);
        let m = t.mean(h).unwrap();
        let y = t.sum(h);
        t.add(m, y).unwrap()
    });
    type Op = fn(&mut Tape, Var) -> Var;
    let ops: [Op; 4] = [
        |t, v| t.relu(v),
        |t, v| t.abs(v),
        |t, v| t.softmax(v).unwrap(),
        |t, v| t.layer_norm(v).unwrap(),
    ];
    for (i, op) in ops.into_iter().enumerate() {
        err = err.max(gradcheck(std::slice::from_ref(&x), &|t, v| {
            let y = op(t, v[0]);
            probe(t, y, 9 + i as u64)
        }));
    }
    err
}

pub fn gather_and_sparse_product() -> f64 {
    let x = random_tensor(&[4, 3], &mut rng(5));
    let mut err = gradcheck(std::slice::from_ref(&x), &|t, v| {
        let y = t.gather_rows(v[0], &[2, 0, 2, 3]).unwrap();
        probe(t, y, 13)
    });
    let sym = Arc::new(
        Csr::from_triplets(
            4,
            4,
            &[
                (0, 1, 0.5),
                (1, 0, 0.5),
                (2, 2, 1.0),
                (3, 1, 0.3),
                (1, 3, 0.3),
            ],
        )
        .unwrap(),
    );
    let asym =
        Arc::new(Csr::from_triplets(2, 4, &[(0, 1, 0.5), (1, 3, -2.0), (1, 0, 1.0)]).unwrap());
    for adj in [sym, asym] {
        err = err.max(gradcheck(std::slice::from_ref(&x), &|t, v| {
            let y = t.spmm(Arc::clone(&adj), v[0]).unwrap();
            probe(t, y, 14)
        }));
    }
    err
}

pub fn gru_cells_for_every_type() -> f64 {
    let mut r = rng(6);
    let mut err: f64 = 0.0;
    for width in [3, 4, 4, 26] {
        let cell = GruCell::xavier(width, 5, &mut r);
        let h = random_tensor(&[3, 5], &mut r);
        let z = random_tensor(&[3, width], &mut r);
        let mut inputs = vec![h, z];
        cell.map("gru", &mut |_, t| inputs.push(t.clone()));
        err = err.max(gradcheck(&inputs, &|t, v| {
            let mut it = v[2..].iter().copied();
            let bound = cell.map("gru", &mut |_, _| it.next().unwrap());
            let y = gru_update(t, &bound, v[0], v[1]).unwrap();
            probe(t, y, 15)
        }));
    }
    err
}

fn former_inputs(f: &EtaFormer) -> Vec<Tensor> {
    let mut out = Vec::new();
    f.map("f", &mut |_, t| out.push(t.clone()));
    out
}

fn rebind(f: &EtaFormer, vars: &[Var]) -> EtaFormer<Var> {
    let mut it = vars.iter().copied();
    f.map("f", &mut |_, _| it.next().unwrap())
}

pub fn header_token_mlp() -> f64 {
    let f = EtaFormer::xavier(8, 1, 2, &mut rng(7));
    gradcheck(&former_inputs(&f), &|t, v| {
        let b = rebind(&f, v);
        let y = b.header.forward(t).unwrap();
        probe(t, y, 16)
    })
}

pub fn each_encoder_block() -> f64 {
    let mut r = rng(8);
    let f = EtaFormer::xavier(8, 2, 2, &mut r);
    let x = random_tensor(&[2, SEQ_LEN, 8], &mut r);
    let mut err: f64 = 0.0;
    for blk in 0..2 {
        let mut inputs = vec![x.clone()];
        inputs.extend(former_inputs(&f));
        err = err.max(gradcheck(&inputs, &|t, v| {
            let b = rebind(&f, &v[1..]);
            let y = b.blocks[blk].forward(t, v[0], 4).unwrap();
            probe(t, y, 17)
        }));
    }
    err
}

pub fn transformer_head_and_whole_transformer() -> f64 {
    let mut r = rng(9);
    let f = EtaFormer::xavier(8, 2, 2, &mut r);
    let x = random_tensor(&[3, 4, 8], &mut r);
    let mut inputs = vec![x];
    inputs.extend(former_inputs(&f));
    let err = gradcheck(&inputs, &|t, v| {
        let b = rebind(&f, &v[1..]);
        let pe = t.constant(positional_encoding(SEQ_LEN, 8));
        let y = b.forward(t, v[0], pe, 4).unwrap();
        probe(t, y, 18)
    });
    let h = random_tensor(&[3, 8], &mut r);
    let mut inputs = vec![h];
    inputs.extend(former_inputs(&f));
    err.max(gradcheck(&inputs, &|t, v| {
        let b = rebind(&f, &v[1..]);
        let n = b.final_norm.forward(t, v[0]).unwrap();
        let y = b.head.forward(t, n).unwrap();
        probe(t, y, 19)
    }))
}

pub fn graph_only_head() -> f64 {
    let mut r = rng(10);
    let head = Linear::xavier(16, 1, &mut r);
    let x = random_tensor(&[5, 16], &mut r);
    gradcheck(&[x, head.w.clone(), head.b.clone()], &|t, v| {
        let b = Linear { w: v[1], b: v[2] };
        let y = b.forward(t, v[0]).unwrap();
        probe(t, y, 20)
    })
}

pub fn composed_model_on_two_orders() -> f64 {
    Mode::ALL
        .into_iter()
        .map(super::composed_error)
        .fold(0.0, f64::max)
}

pub type Case = (&'static str, fn() -> f64);

pub const CASES: &[Case] = &[
    ("matmul and bmm", matmul_and_bmm),
    ("broadcast arithmetic", broadcast_arithmetic),
    ("concat, slice, reshape, swap", concat_slice_reshape_swap),
    ("reductions and activations", reductions_and_activations),
    ("gather and sparse product", gather_and_sparse_product),
    ("GRU per element type", gru_cells_for_every_type),
    ("header token MLP", header_token_mlp),
    ("each encoder block", each_encoder_block),
    (
        "transformer head and whole transformer",
        transformer_head_and_whole_transformer,
    ),
    ("graph-only head", graph_only_head),
    ("composed model, all modes", composed_model_on_two_orders),
];
