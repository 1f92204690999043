//! Transformer regressor over the four element rows of an order.
//!
//! Each element contributes `[z ‖ h]` (raw features, then its graph
//! embedding), zero-padded to a common width `W`. A learned header token is
//! prepended, sinusoidal position codes are added to all five rows, and the
//! header's output after the encoder goes through a layer norm and a single
//! affine map to give the prediction.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{IgtError, Result};
use crate::params::{param_group, LayerNormAffine, Linear};
use crate::tensor::Tensor;

/// Header token plus four element rows.
pub const SEQ_LEN: usize = 5;
pub const N_ELEMENTS: usize = 4;

/// Smallest multiple of `heads` that fits every `raw width + embed_dim`.
pub fn aligned_width(raw_widths: [usize; 4], embed_dim: usize, heads: usize) -> usize {
    let w = raw_widths
        .iter()
        .map(|w| w + embed_dim)
        .max()
        .unwrap_or(0)
        .max(1);
    w.div_ceil(heads) * heads
}

/// Concatenates and zero-pads one order's element rows to `width`.
///
/// Elements are taken in (retailer, origin, destination, payment slot) order.
pub fn align_features(
    z: [&[f64]; N_ELEMENTS],
    h: [Option<&[f64]>; N_ELEMENTS],
    width: usize,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(N_ELEMENTS * width);
    for k in 0..N_ELEMENTS {
        let emb = h[k].unwrap_or(&[]);
        if z[k].is_empty() && emb.is_empty() {
            return Err(IgtError::Invalid(format!(
                "element {k} has neither features nor embedding"
            )));
        }
        let n = z[k].len() + emb.len();
        if n > width {
            return Err(IgtError::Shape {
                op: "align_features",
                shapes: vec![vec![z[k].len(), emb.len()], vec![width]],
            });
        }
        data.extend_from_slice(z[k]);
        data.extend_from_slice(emb);
        data.resize((k + 1) * width, 0.0);
    }
    Tensor::new(&[N_ELEMENTS, width], data)
}

/// Batched alignment on a tape: `z[k]` is `B × w_k`, `h[k]` (when given) is
/// `B × D`; the result is `B × 4 × width`.
pub fn align_batch(
    tape: &mut Tape,
    z: [Var; N_ELEMENTS],
    h: Option<[Var; N_ELEMENTS]>,
    width: usize,
) -> Result<Var> {
    let batch = tape.shape(z[0])[0];
    let mut rows = Vec::with_capacity(N_ELEMENTS);
    for k in 0..N_ELEMENTS {
        let mut parts = vec![z[k]];
        if let Some(h) = h {
            parts.push(h[k]);
        }
        let used: usize = parts.iter().map(|&p| tape.shape(p)[1]).sum();
        if used > width {
            return Err(IgtError::Shape {
                op: "align_batch",
                shapes: vec![vec![batch, used], vec![batch, width]],
            });
        }
        if used < width {
            parts.push(tape.constant(Tensor::zeros(&[batch, width - used])));
        }
        let row = tape.concat(&parts, 1)?;
        rows.push(tape.reshape(row, &[batch, 1, width])?);
    }
    tape.concat(&rows, 1)
}

/// Standard sinusoidal position table, `len × width`.
pub fn positional_encoding(len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; len * width];
    for pos in 0..len {
        for c in 0..width {
            let pair = (c / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / width as f64);
            data[pos * width + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[len, width], data).expect("sized above")
}

param_group! {
    /// Learned seed row fed through a one-hidden-layer MLP.
    pub struct HeaderToken { seed, w1, b1, w2, b2 }
}

param_group! {
    /// Pre-norm encoder block: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
    pub struct EncoderBlock {
        ln1_gamma, ln1_beta,
        wq, bq, wk, bk, wv, bv, wo, bo,
        ln2_gamma, ln2_beta,
        ff1_w, ff1_b, ff2_w, ff2_b,
    }
}

impl HeaderToken {
    pub fn xavier<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        Self {
            seed: Tensor::xavier(&[1, width], rng).param(),
            w1: Tensor::xavier(&[width, width], rng).param(),
            b1: Tensor::zeros(&[width]).param(),
            w2: Tensor::xavier(&[width, width], rng).param(),
            b2: Tensor::zeros(&[width]).param(),
        }
    }
}

impl HeaderToken<Var> {
    /// The `1 × W` header row.
    pub fn forward(&self, tape: &mut Tape) -> Result<Var> {
        let a = tape.matmul(self.seed, self.w1)?;
        let a = tape.add(a, self.b1)?;
        let a = tape.tanh(a);
        let b = tape.matmul(a, self.w2)?;
        tape.add(b, self.b2)
    }
}

impl EncoderBlock {
    pub fn xavier<R: Rng + ?Sized>(width: usize, ffn: usize, rng: &mut R) -> Self {
        let mut w = |a, b| Tensor::xavier(&[a, b], rng).param();
        let z = |n| Tensor::zeros(&[n]).param();
        let one = |n| Tensor::filled(&[n], 1.0).param();
        Self {
            ln1_gamma: one(width),
            ln1_beta: z(width),
            wq: w(width, width),
            bq: z(width),
            wk: w(width, width),
            bk: z(width),
            wv: w(width, width),
            bv: z(width),
            wo: w(width, width),
            bo: z(width),
            ln2_gamma: one(width),
            ln2_beta: z(width),
            ff1_w: w(width, ffn),
            ff1_b: z(ffn),
            ff2_w: w(ffn, width),
            ff2_b: z(width),
        }
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = tape.layer_norm(x)?;
    let s = tape.mul(n, gamma)?;
    tape.add(s, beta)
}

/// `[B, n, W] -> [B·heads, n, W/heads]`
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n, w) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, &[b, n, heads, w / heads])?;
    let t = tape.swap_axes12(r)?;
    tape.reshape(t, &[b * heads, n, w / heads])
}

fn merge_heads(tape: &mut Tape, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (n, dh) = (s[1], s[2]);
    let r = tape.reshape(x, &[batch, heads, n, dh])?;
    let t = tape.swap_axes12(r)?;
    tape.reshape(t, &[batch, n, heads * dh])
}

impl EncoderBlock<Var> {
    /// Attention probabilities `[B·heads, n, n]` of this block on `x`.
    pub fn attention(&self, tape: &mut Tape, x: Var, heads: usize) -> Result<(Var, Var)> {
        let a = norm(tape, x, self.ln1_gamma, self.ln1_beta)?;
        let q = affine(tape, a, self.wq, self.bq)?;
        let k = affine(tape, a, self.wk, self.bk)?;
        let v = affine(tape, a, self.wv, self.bv)?;
        let w = tape.shape(x)[2];
        let (q, k, v) = (
            split_heads(tape, q, heads)?,
            split_heads(tape, k, heads)?,
            split_heads(tape, v, heads)?,
        );
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / ((w / heads) as f64).sqrt());
        let probs = tape.softmax(scores)?;
        let ctx = tape.bmm(probs, v, false)?;
        Ok((probs, ctx))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
        let batch = tape.shape(x)[0];
        let (_, ctx) = self.attention(tape, x, heads)?;
        let merged = merge_heads(tape, ctx, batch, heads)?;
        let attn = affine(tape, merged, self.wo, self.bo)?;
        let x = tape.add(x, attn)?;
        let f = norm(tape, x, self.ln2_gamma, self.ln2_beta)?;
        let f = affine(tape, f, self.ff1_w, self.ff1_b)?;
        let f = tape.relu(f);
        let f = affine(tape, f, self.ff2_w, self.ff2_b)?;
        tape.add(x, f)
    }
}

/// All ETAformer weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EtaFormer<T = Tensor> {
    pub header: HeaderToken<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub final_norm: LayerNormAffine<T>,
    pub head: Linear<T>,
}

impl<T> EtaFormer<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> EtaFormer<U> {
        EtaFormer {
            header: self.header.map(&format!("{prefix}.header"), f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("{prefix}.block{i}"), f))
                .collect(),
            final_norm: self.final_norm.map(&format!("{prefix}.final_norm"), f),
            head: self.head.map(&format!("{prefix}.head"), f),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.header.visit_mut(&format!("{prefix}.header"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{i}"), f);
        }
        self.final_norm
            .visit_mut(&format!("{prefix}.final_norm"), f);
        self.head.visit_mut(&format!("{prefix}.head"), f);
    }
}

impl EtaFormer {
    pub fn xavier<R: Rng + ?Sized>(
        width: usize,
        depth: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            header: HeaderToken::xavier(width, rng),
            blocks: (0..depth)
                .map(|_| EncoderBlock::xavier(width, width * ffn_mult, rng))
                .collect(),
            final_norm: LayerNormAffine::new(width),
            head: Linear::xavier(width, 1, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.header.seed.cols()
    }
}

impl EtaFormer<Var> {
    /// Predicts one value per order from aligned rows `x` of shape
    /// `[B, 4, W]`; returns shape `[B]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, pe: Var, heads: usize) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let w = tape.shape(self.header.seed)[1];
        if s.len() != 3 || s[1] != N_ELEMENTS || s[2] != w || !w.is_multiple_of(heads) {
            return Err(IgtError::Shape {
                op: "etaformer",
                shapes: vec![s, vec![w, heads]],
            });
        }
        let batch = s[0];
        let seq = self.embed(tape, x, pe)?;
        let mut seq = seq;
        for blk in &self.blocks {
            seq = blk.forward(tape, seq, heads)?;
        }
        let hdr = tape.slice(seq, 1, 0, 1)?;
        let hdr = tape.reshape(hdr, &[batch, w])?;
        let hdr = self.final_norm.forward(tape, hdr)?;
        let y = self.head.forward(tape, hdr)?;
        tape.reshape(y, &[batch])
    }

    /// Header row prepended and positions added: `[B, 5, W]`.
    pub fn embed(&self, tape: &mut Tape, x: Var, pe: Var) -> Result<Var> {
        let batch = tape.shape(x)[0];
        let w = tape.shape(x)[2];
        let token = self.header.forward(tape)?;
        let ones = tape.constant(Tensor::filled(&[batch, 1], 1.0));
        let rep = tape.matmul(ones, token)?;
        let rep = tape.reshape(rep, &[batch, 1, w])?;
        let seq = tape.concat(&[rep, x], 1)?;
        tape.add(seq, pe)
    }
}
