use crate::attention::{multi_head, SelfAttention};
use crate::error::{Error, Result};
use crate::numcore::layers::{Activation, Init, LayerNorm, Mlp2};
use crate::numcore::{Graph, NodeId, ParamStore};
use crate::posembed::{key_grid_pe, SinusoidConfig};

/// Row-major cell indices of each `window x window` tile; edge tiles are clipped.
pub fn window_partition(h: usize, w: usize, window: usize) -> Vec<Vec<usize>> {
    let mut tiles = Vec::new();
    for r0 in (0..h).step_by(window) {
        for c0 in (0..w).step_by(window) {
            let mut cells = Vec::new();
            for r in r0..(r0 + window).min(h) {
                for c in c0..(c0 + window).min(w) {
                    cells.push(r * w + c);
                }
            }
            tiles.push(cells);
        }
    }
    tiles
}

/// Pre-norm encoder block with self-attention restricted to non-overlapping
/// windows of the feature map.
#[derive(Clone, Debug)]
pub struct FeatureHead {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp2,
    pub window: usize,
    pub sinusoid: SinusoidConfig,
}

impl FeatureHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        ffn_hidden: usize,
        window: usize,
        sinusoid: SinusoidConfig,
        act: Activation,
        init: &mut Init,
    ) -> Result<Self> {
        if window == 0 {
            return Err(Error::Invalid("window must be at least 1".into()));
        }
        if 2 * sinusoid.d != d_model {
            return Err(Error::Invalid(format!(
                "key embedding width {} differs from d_model {d_model}",
                2 * sinusoid.d
            )));
        }
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), d_model, heads, init)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model)?,
            ffn: Mlp2::new(store, &format!("{name}.ffn"), d_model, ffn_hidden, d_model, act, init)?,
            window,
            sinusoid,
        })
    }

    /// Maps `[H*W, C]` tokens to tokens of the same shape.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        if g.shape(x)[0] != h * w {
            return Err(Error::Invalid(format!("{} tokens for a {h}x{w} map", g.shape(x)[0])));
        }
        let pe = key_grid_pe(h, w, &self.sinusoid)?;
        let pe = g.constant(pe.reshape(&[h * w, 2 * self.sinusoid.d])?)?;
        let xn = self.ln1.forward(g, store, x)?;
        let qk_in = g.add(xn, pe)?;
        let q = self.attn.q.forward(g, store, qk_in)?;
        let k = self.attn.k.forward(g, store, qk_in)?;
        let v = self.attn.v.forward(g, store, xn)?;

        let tiles = window_partition(h, w, self.window);
        let mut outs = Vec::with_capacity(tiles.len());
        let mut order = Vec::with_capacity(h * w);
        for cells in &tiles {
            let (qt, kt, vt) = if tiles.len() == 1 {
                (q, k, v)
            } else {
                (g.gather_rows(q, cells)?, g.gather_rows(k, cells)?, g.gather_rows(v, cells)?)
            };
            outs.push(multi_head(g, qt, kt, vt, self.attn.heads)?.0);
            order.extend_from_slice(cells);
        }
        let mut a = if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs)? };
        if tiles.len() > 1 {
            let mut inverse = vec![0; h * w];
            for (pos, &cell) in order.iter().enumerate() {
                inverse[cell] = pos;
            }
            a = g.gather_rows(a, &inverse)?;
        }
        let a = self.attn.out.forward(g, store, a)?;
        let x = g.add(x, a)?;
        let xn = self.ln2.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, xn)?;
        g.add(x, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{SeededRng, Tensor};

    fn head(window: usize, seed: u64) -> (ParamStore, FeatureHead) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let mut init = Init { rng: &mut rng, std: 0.3 };
        let cfg = SinusoidConfig::new(4, 20.0).unwrap();
        let fh = FeatureHead::new(&mut store, "fh", 8, 2, 16, window, cfg, Activation::Relu, &mut init).unwrap();
        (store, fh)
    }

    fn tokens(n: usize, seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        Tensor::from_fn(&[n, 8], |_| rng.normal())
    }

    fn run(fh: &FeatureHead, store: &ParamStore, x: &Tensor, h: usize, w: usize) -> Tensor {
        let mut g = Graph::new();
        let xn = g.constant(x.clone()).unwrap();
        let y = fh.forward(&mut g, store, xn, h, w).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn partition_clips_edges() {
        let tiles = window_partition(5, 3, 2);
        assert_eq!(tiles.len(), 6);
        assert_eq!(tiles[0], vec![0, 1, 3, 4]);
        assert_eq!(tiles[1], vec![2, 5]);
        assert_eq!(tiles[5], vec![14]);
        let mut all: Vec<usize> = tiles.concat();
        all.sort();
        assert_eq!(all, (0..15).collect::<Vec<_>>());
    }

    #[test]
    fn single_window_is_full_attention_block() {
        let (store, fh) = head(4, 1);
        let x = tokens(16, 2);
        let y = run(&fh, &store, &x, 4, 4);

        let mut g = Graph::new();
        let xn = g.constant(x).unwrap();
        let pe = key_grid_pe(4, 4, &fh.sinusoid).unwrap().reshape(&[16, 8]).unwrap();
        let pe = g.constant(pe).unwrap();
        let n1 = fh.ln1.forward(&mut g, &store, xn).unwrap();
        let (a, _) = fh.attn.forward(&mut g, &store, n1, Some(pe)).unwrap();
        let r = g.add(xn, a).unwrap();
        let n2 = fh.ln2.forward(&mut g, &store, r).unwrap();
        let f = fh.ffn.forward(&mut g, &store, n2).unwrap();
        let expected = g.add(r, f).unwrap();
        assert!(g.value(expected).max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn zero_residual_branches_are_identity() {
        let (mut store, fh) = head(2, 3);
        for name in ["fh.attn.out.weight", "fh.ffn.fc2.weight"] {
            let shape = store.by_name(name).unwrap().shape().to_vec();
            store.set(name, Tensor::zeros(&shape)).unwrap();
        }
        let x = tokens(20, 4);
        assert_eq!(run(&fh, &store, &x, 4, 5), x);
    }

    #[test]
    fn tokens_ignore_cells_outside_their_window() {
        let (store, fh) = head(2, 5);
        let x = tokens(20, 6);
        let y = run(&fh, &store, &x, 4, 5);
        let mut x2 = x.clone();
        // cell (3, 4) lies in the bottom-right tile; cell (0, 0) in the top-left
        for v in x2.row_mut(19) {
            *v += 3.0;
        }
        let y2 = run(&fh, &store, &x2, 4, 5);
        assert_eq!(y.row(0), y2.row(0));
        assert_eq!(y.row(6), y2.row(6));
        assert_ne!(y.row(19), y2.row(19));
    }
}
