//! From detections to pair queries: score filtering, a unary encoder over the
//! kept detections, pairwise spatial features and LayerNorm-fused query
//! construction.

use crate::attention::SelfAttention;
use crate::error::{Error, Result};
use crate::numcore::layers::{Activation, Init, LayerNorm, Linear, Mlp2};
use crate::numcore::{Graph, NodeId, ParamStore, Tensor};
use crate::posembed::{box_pe_graph, unary_box_pe, BoxN, RefScaleHead, SinusoidConfig};

/// Object class id reserved for humans.
pub const HUMAN_CLASS: usize = 0;

/// Width of [`spatial_pair_features`].
pub const SPATIAL_DIM: usize = 36;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoxN,
    /// Original `[x1, y1, x2, y2]` in pixels.
    pub pixel_box: [f64; 4],
    pub class_id: usize,
    pub score: f64,
    pub feature: Vec<f64>,
    pub is_human: bool,
}

impl Detection {
    pub fn new(pixel_box: [f64; 4], image_size: (f64, f64), class_id: usize, score: f64, feature: Vec<f64>) -> Self {
        Self {
            bbox: BoxN::from_pixels(pixel_box, image_size.0, image_size.1),
            pixel_box,
            class_id,
            score,
            feature,
            is_human: class_id == HUMAN_CLASS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairIndex {
    pub h: usize,
    pub o: usize,
}

/// A materialised pair query.
#[derive(Clone, Debug, PartialEq)]
pub struct PairQuery {
    pub content: Vec<f64>,
    pub pe: Vec<f64>,
    pub pair: PairIndex,
    pub boxes: (BoxN, BoxN),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterConfig {
    pub thresh: f64,
    pub min_n: usize,
    pub max_n: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { thresh: 0.05, min_n: 3, max_n: 15 }
    }
}

/// Indices of the detections kept by [`filter_and_sample`], humans first.
pub fn filter_indices(dets: &[Detection], cfg: &FilterConfig) -> Vec<usize> {
    let mut kept = Vec::new();
    for human in [true, false] {
        let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].is_human == human).collect();
        idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
        let passing = idx.iter().filter(|&&i| dets[i].score >= cfg.thresh).count();
        let n = if passing < cfg.min_n { cfg.min_n.min(idx.len()) } else { passing.min(cfg.max_n) };
        kept.extend_from_slice(&idx[..n]);
    }
    kept
}

/// Keeps at least `min_n` and at most `max_n` humans and, separately, non-humans.
///
/// Detections scoring at least `thresh` survive; a shortfall below `min_n` is
/// filled from the highest-scoring remaining detections.
pub fn filter_and_sample(dets: &[Detection], cfg: &FilterConfig) -> Vec<Detection> {
    filter_indices(dets, cfg).into_iter().map(|i| dets[i].clone()).collect()
}

/// Every ordered `(h, o)` with a human subject and `o != h`, human-major.
pub fn enumerate_pairs(dets: &[Detection]) -> Vec<PairIndex> {
    let mut pairs = Vec::new();
    for h in (0..dets.len()).filter(|&h| dets[h].is_human) {
        for o in (0..dets.len()).filter(|&o| o != h) {
            pairs.push(PairIndex { h, o });
        }
    }
    pairs
}

/// Intersection over union of two normalised boxes.
pub fn box_iou(a: &BoxN, b: &BoxN) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// 18 handcrafted geometry entries of a box pair followed by `ln(|v| + 1e-6)`
/// of each.
pub fn spatial_pair_features(bh: &BoxN, bo: &BoxN) -> [f64; SPATIAL_DIM] {
    let (wh, hh, _) = bh.floored_size();
    let (wo, ho, _) = bo.floored_size();
    let area_h = wh * hh;
    let area_o = wo * ho;
    let base = [
        bh.cx,
        bh.cy,
        bh.w,
        bh.h,
        bo.cx,
        bo.cy,
        bo.w,
        bo.h,
        bh.area(),
        bo.area(),
        wh / hh,
        wo / ho,
        box_iou(bh, bo),
        (bo.cx - bh.cx) / wh,
        (bo.cy - bh.cy) / hh,
        area_o / area_h,
        wo / wh,
        ho / hh,
    ];
    let mut out = [0.0; SPATIAL_DIM];
    out[..18].copy_from_slice(&base);
    for (k, v) in base.iter().enumerate() {
        out[18 + k] = (v.abs() + 1e-6).ln();
    }
    out
}

/// Standard post-norm encoder block over detection features, with the unary
/// box embedding added to queries and keys.
#[derive(Clone, Debug)]
pub struct UnaryEncoder {
    pub attn: SelfAttention,
    pub ln1: LayerNorm,
    pub ffn: Mlp2,
    pub ln2: LayerNorm,
    pub tau: f64,
}

impl UnaryEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        ffn_hidden: usize,
        act: Activation,
        tau: f64,
        init: &mut Init,
    ) -> Result<Self> {
        if d_model % 4 != 0 {
            return Err(Error::Invalid(format!("d_model {d_model} must be a multiple of 4")));
        }
        Ok(Self {
            attn: SelfAttention::new(store, &format!("{name}.attn"), d_model, heads, init)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model)?,
            ffn: Mlp2::new(store, &format!("{name}.ffn"), d_model, ffn_hidden, d_model, act, init)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model)?,
            tau,
        })
    }

    /// Refined `[n, d_model]` features and the per-head attention weights.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        boxes: &[BoxN],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let d = g.shape(x)[1];
        if g.shape(x)[0] != boxes.len() {
            return Err(Error::Invalid(format!("{} features for {} boxes", g.shape(x)[0], boxes.len())));
        }
        let mut pe = Vec::with_capacity(boxes.len() * d);
        for b in boxes {
            pe.extend(unary_box_pe(b, d, self.tau)?);
        }
        let pe = g.constant(Tensor::new(vec![boxes.len(), d], pe)?)?;
        let (a, weights) = self.attn.forward(g, store, x, Some(pe))?;
        let x = g.add(x, a)?;
        let x = self.ln1.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, x)?;
        let x = g.add(x, f)?;
        Ok((self.ln2.forward(g, store, x)?, weights))
    }
}

/// Graph nodes for a batch of pair queries.
#[derive(Clone, Debug)]
pub struct QueryNodes {
    /// `[n_pairs, d_model]`.
    pub content: NodeId,
    /// `[n_pairs, 4d]`, human block then object block.
    pub pe: NodeId,
    pub pairs: Vec<PairIndex>,
    pub boxes: Vec<(BoxN, BoxN)>,
    /// Boxes whose size was floored during modulation.
    pub clamped: usize,
}

impl QueryNodes {
    pub fn materialise(&self, g: &Graph) -> Vec<PairQuery> {
        let (c, p) = (g.value(self.content), g.value(self.pe));
        (0..self.pairs.len())
            .map(|i| PairQuery {
                content: c.row(i).to_vec(),
                pe: p.row(i).to_vec(),
                pair: self.pairs[i],
                boxes: self.boxes[i],
            })
            .collect()
    }
}

/// Fuses appearance and spatial features into pair content, and builds the
/// (optionally modulated) box-pair embedding.
#[derive(Clone, Debug)]
pub struct QueryBuilder {
    pub ln_app: LayerNorm,
    pub spatial: Linear,
    pub ln_sp: LayerNorm,
    pub fuse: Mlp2,
    pub ref_head: RefScaleHead,
    pub sinusoid: SinusoidConfig,
}

impl QueryBuilder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        sinusoid: SinusoidConfig,
        act: Activation,
        init: &mut Init,
    ) -> Result<Self> {
        sinusoid.validate()?;
        Ok(Self {
            ln_app: LayerNorm::new(store, &format!("{name}.ln_app"), 2 * d_model)?,
            spatial: Linear::new(store, &format!("{name}.spatial"), SPATIAL_DIM, d_model, init)?,
            ln_sp: LayerNorm::new(store, &format!("{name}.ln_sp"), d_model)?,
            fuse: Mlp2::new(store, &format!("{name}.fuse"), 3 * d_model, d_model, d_model, act, init)?,
            ref_head: RefScaleHead::new(store, &format!("{name}.ref"), d_model, act, init)?,
            sinusoid,
        })
    }

    /// Queries for `pairs` over the refined detection features `[n_det, d_model]`.
    /// Returns `None` when there are no pairs.
    pub fn build(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        refined: NodeId,
        dets: &[Detection],
        pairs: &[PairIndex],
        modulate: bool,
    ) -> Result<Option<QueryNodes>> {
        if pairs.is_empty() {
            return Ok(None);
        }
        let hs: Vec<usize> = pairs.iter().map(|p| p.h).collect();
        let os: Vec<usize> = pairs.iter().map(|p| p.o).collect();
        let fh = g.gather_rows(refined, &hs)?;
        let fo = g.gather_rows(refined, &os)?;
        let app = g.concat_cols(&[fh, fo])?;
        let app = self.ln_app.forward(g, store, app)?;

        let boxes: Vec<(BoxN, BoxN)> = pairs.iter().map(|p| (dets[p.h].bbox, dets[p.o].bbox)).collect();
        let mut sp = Vec::with_capacity(pairs.len() * SPATIAL_DIM);
        for (bh, bo) in &boxes {
            sp.extend_from_slice(&spatial_pair_features(bh, bo));
        }
        let sp = g.constant(Tensor::new(vec![pairs.len(), SPATIAL_DIM], sp)?)?;
        let sp = self.spatial.forward(g, store, sp)?;
        let sp = self.ln_sp.forward(g, store, sp)?;
        let fused = g.concat_cols(&[app, sp])?;
        let content = self.fuse.forward(g, store, fused)?;

        let bh: Vec<BoxN> = boxes.iter().map(|b| b.0).collect();
        let bo: Vec<BoxN> = boxes.iter().map(|b| b.1).collect();
        let (refs_h, refs_o) = if modulate {
            let refs = self.ref_head.forward(g, store, refined)?;
            (Some(g.gather_rows(refs, &hs)?), Some(g.gather_rows(refs, &os)?))
        } else {
            (None, None)
        };
        let (pe_h, ch) = box_pe_graph(g, &bh, refs_h, &self.sinusoid)?;
        let (pe_o, co) = box_pe_graph(g, &bo, refs_o, &self.sinusoid)?;
        let pe = g.concat_cols(&[pe_h, pe_o])?;
        Ok(Some(QueryNodes { content, pe, pairs: pairs.to_vec(), boxes, clamped: ch + co }))
    }
}

/// Materialised queries for `pairs`; empty when there are no pairs.
pub fn build_queries(
    builder: &QueryBuilder,
    store: &ParamStore,
    refined: &Tensor,
    dets: &[Detection],
    pairs: &[PairIndex],
    modulate: bool,
) -> Result<Vec<PairQuery>> {
    let mut g = Graph::new();
    let r = g.constant(refined.clone())?;
    Ok(match builder.build(&mut g, store, r, dets, pairs, modulate)? {
        Some(q) => q.materialise(&g),
        None => Vec::new(),
    })
}
