//! Multi-head scaled dot-product attention shared by the unary encoder, the
//! pair self-attention and the windowed feature head.

use crate::error::{Error, Result};
use crate::numcore::layers::{Init, Linear};
use crate::numcore::{Graph, NodeId, ParamStore};

/// Attention of `q [n, d]` over `k, v [m, d]`, heads taken as contiguous
/// column blocks. Returns the `[n, d]` output and one `[n, m]` weight node
/// per head.
pub fn multi_head(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<(NodeId, Vec<NodeId>)> {
    let d = g.shape(q)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Invalid(format!("width {d} not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh)?, g.slice_cols(k, h * dh, dh)?, g.slice_cols(v, h * dh, dh)?)
        };
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, scale)?;
        let a = g.softmax(logits)?;
        outs.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, weights))
}

/// Self-attention with separate query/key/value/output projections.
///
/// An optional positional embedding is added to the inputs of the query and
/// key projections only.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, init: &mut Init) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Invalid(format!("width {d} not divisible into {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, init)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, init)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, init)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, init)?,
            heads,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        pe: Option<NodeId>,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let qk_in = match pe {
            Some(p) => g.add(x, p)?,
            None => x,
        };
        let q = self.q.forward(g, store, qk_in)?;
        let k = self.k.forward(g, store, qk_in)?;
        let v = self.v.forward(g, store, x)?;
        let (o, w) = multi_head(g, q, k, v, self.heads)?;
        Ok((self.out.forward(g, store, o)?, w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{SeededRng, Tensor};

    #[test]
    fn weights_are_row_stochastic() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(4);
        let mut init = Init { rng: &mut rng, std: 0.3 };
        let att = SelfAttention::new(&mut store, "a", 8, 2, &mut init).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[5, 8], |i| (i as f64 * 0.37).sin())).unwrap();
        let (y, w) = att.forward(&mut g, &store, x, None).unwrap();
        assert_eq!(g.shape(y), &[5, 8]);
        assert_eq!(w.len(), 2);
        for &wh in &w {
            for r in 0..5 {
                let s: f64 = g.value(wh).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(4);
        let mut init = Init { rng: &mut rng, std: 0.3 };
        assert!(SelfAttention::new(&mut store, "a", 6, 4, &mut init).is_err());
    }
}
