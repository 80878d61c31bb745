//! Finite-difference gradient checks over every differentiable graph
//! operation and over a small end-to-end decoder instance.

use crate::decoder::{Decoder, DecoderConfig, FeatureHead, PeMode};
use crate::error::Result;
use crate::numcore::layers::Init;
use crate::numcore::{finite_diff_check, GradCheckReport, Graph, NodeId, ParamStore, SeededRng, Tensor};
use crate::posembed::{pair_pe, BoxN, RefScales};

pub const GRADCHECK_EPS: f64 = 1e-6;

/// Names of the operations covered by [`op_gradchecks`].
pub const OPS: [&str; 23] = [
    "matmul",
    "matmul_nt",
    "add",
    "sub",
    "mul",
    "add_row",
    "mul_col",
    "scale",
    "add_scalar",
    "sigmoid",
    "relu",
    "leaky_relu",
    "softmax",
    "layer_norm",
    "concat_cols",
    "slice_cols",
    "concat_rows",
    "gather_rows",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "focal_loss",
];

fn away_from_zero(rng: &mut SeededRng) -> f64 {
    let v = rng.uniform_in(0.2, 1.5);
    if rng.bernoulli(0.5) {
        v
    } else {
        -v
    }
}

/// Checks one operation. Inputs are parameters `a [3,4]`, `b [3,4]`,
/// `c [4,5]` and `r [3]`; the output is contracted with fixed random weights
/// so every output entry matters.
pub fn op_gradcheck(op: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::from_fn(&[3, 4], |_| away_from_zero(&mut rng)))?;
    let b = store.add("b", Tensor::from_fn(&[3, 4], |_| away_from_zero(&mut rng)))?;
    let c = store.add("c", Tensor::from_fn(&[4, 5], |_| rng.normal()))?;
    let r = store.add("r", Tensor::from_fn(&[3], |_| rng.normal()))?;
    let gain = store.add("gain", Tensor::from_fn(&[4], |_| 1.0 + 0.3 * rng.normal()))?;
    let bias = store.add("bias", Tensor::from_fn(&[4], |_| 0.3 * rng.normal()))?;
    let targets: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
    let mask: Vec<bool> = (0..12).map(|i| i != 4).collect();
    let op = op.to_string();
    let f = move |g: &mut Graph, s: &ParamStore| -> Result<NodeId> {
        let (a, b, c, r) = (g.param(s, a)?, g.param(s, b)?, g.param(s, c)?, g.param(s, r)?);
        let out = match op.as_str() {
            "matmul" => g.matmul(a, c)?,
            "matmul_nt" => g.matmul_nt(a, b)?,
            "add" => g.add(a, b)?,
            "sub" => g.sub(a, b)?,
            "mul" => g.mul(a, b)?,
            "add_row" => {
                let row = g.param(s, bias)?;
                g.add_row(a, row)?
            }
            "mul_col" => g.mul_col(a, r)?,
            "scale" => g.scale(a, -1.7)?,
            "add_scalar" => {
                let x = g.add_scalar(a, 0.9)?;
                g.mul(x, b)?
            }
            "sigmoid" => g.sigmoid(a)?,
            "relu" => g.relu(a)?,
            "leaky_relu" => g.leaky_relu(a, 0.1)?,
            "softmax" => g.softmax(a)?,
            "layer_norm" => {
                let (gn, bs) = (g.param(s, gain)?, g.param(s, bias)?);
                g.layer_norm(a, gn, bs, 1e-5)?
            }
            "concat_cols" => g.concat_cols(&[b, a])?,
            "slice_cols" => g.slice_cols(a, 1, 2)?,
            "concat_rows" => g.concat_rows(&[a, b])?,
            "gather_rows" => g.gather_rows(a, &[2, 0, 2, 1])?,
            "transpose" => g.transpose(a)?,
            "reshape" => g.reshape(a, &[2, 6])?,
            "sum" => {
                let x = g.mul(a, b)?;
                return g.sum(x);
            }
            "mean" => {
                let x = g.mul(a, b)?;
                return g.mean(x);
            }
            "focal_loss" => return g.focal_loss(a, &targets, &mask, 0.25, 2.0),
            other => return Err(crate::Error::Invalid(format!("no gradient check for `{other}`"))),
        };
        let shape = g.shape(out).to_vec();
        let mut wrng = SeededRng::with_stream(seed, 1);
        let w = g.constant(Tensor::from_fn(&shape, |_| wrng.normal()))?;
        let y = g.mul(out, w)?;
        g.sum(y)
    };
    finite_diff_check(f, &store, GRADCHECK_EPS)
}

/// Every operation in [`OPS`] with its report.
pub fn op_gradchecks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    OPS.iter().map(|&op| op_gradcheck(op, seed).map(|r| (op, r))).collect()
}

/// Full decoder (window feature head, two layers) plus focal loss on
/// `d_model = 16`, two pairs and a 4x4 map.
pub fn decoder_gradcheck(mode: PeMode, seed: u64) -> Result<GradCheckReport> {
    let mut cfg = DecoderConfig::new(16, 5);
    cfg.n_heads = 2;
    cfg.window = 2;
    cfg.ffn_hidden = 24;
    cfg.pe_mode = mode;
    let (h, w, n_pairs) = (4, 4, 2);
    let mut store = ParamStore::new();
    let mut rng = SeededRng::new(seed);
    let mut init = Init { rng: &mut rng, std: 0.3 };
    let decoder = Decoder::new(&mut store, "dec", &cfg, &mut init)?;
    let head = FeatureHead::new(&mut store, "feat", 16, 2, 24, 2, cfg.sinusoid, cfg.activation, &mut init)?;
    let mut rng = SeededRng::with_stream(seed, 1);
    let content = Tensor::from_fn(&[n_pairs, 16], |_| rng.normal());
    let mut pe = Vec::new();
    for _ in 0..n_pairs {
        let mut b = || BoxN::new(rng.uniform(), rng.uniform(), rng.uniform_in(0.1, 0.6), rng.uniform_in(0.1, 0.6));
        let (bh, bo) = (b(), b());
        let refs = RefScales { w_ref: 0.3, h_ref: 0.4 };
        pe.extend(pair_pe(&bh, &bo, &refs, &refs, &cfg.sinusoid)?);
    }
    let pe = Tensor::new(vec![n_pairs, 4 * cfg.sinusoid.d], pe)?;
    let tokens = Tensor::from_fn(&[h * w, 16], |_| rng.normal());
    let targets = [true, false, false, true, false, false, true, false, true, false];
    let mask = [true, true, false, true, true, true, true, true, false, true];
    let f = |g: &mut Graph, s: &ParamStore| -> Result<NodeId> {
        let c = g.constant(content.clone())?;
        let p = g.constant(pe.clone())?;
        let t = g.constant(tokens.clone())?;
        let t = head.forward(g, s, t, h, w)?;
        let m = decoder.memory(g, t, h, w)?;
        let out = decoder.forward(g, s, c, p, Some(&m), false)?;
        g.focal_loss(out.logits, &targets, &mask, 0.5, 0.1)
    };
    finite_diff_check(f, &store, GRADCHECK_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for (op, rep) in op_gradchecks(3).unwrap() {
            assert!(rep.max_rel_error < 1e-6, "{op}: {rep:?}");
            assert!(rep.coordinates > 0);
        }
        assert!(op_gradcheck("conv", 0).is_err());
    }
}
