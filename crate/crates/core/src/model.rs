//! The full interaction model: unary encoder, pair queries, optional feature
//! head and the pair decoder, plus the glue that turns a [`Sample`] into
//! training targets or scored evaluation records.

use crate::dataset::{DetectionSet, Sample};
use crate::decoder::{AttnRecord, Decoder, DecoderConfig, FeatureHead, FeatureMap, Memory};
use crate::error::{shape_err, Error, Result};
use crate::eval::EvalRecord;
use crate::numcore::layers::Init;
use crate::numcore::{Graph, NodeId, ParamStore};
use crate::objective::{action_mask, action_scores, focal_loss, fuse_scores, pair_targets, ActionTable, FocalConfig};
use crate::pairing::{enumerate_pairs, filter_indices, Detection, FilterConfig, PairIndex, QueryBuilder, QueryNodes, UnaryEncoder};
use crate::posembed::BoxN;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub unary_heads: usize,
    pub unary_ffn: usize,
    /// Temperature of the unary box embedding.
    pub unary_tau: f64,
    pub filter: FilterConfig,
    pub focal: FocalConfig,
    /// Weight of the action score in score fusion.
    pub lambda: f64,
    /// Both boxes of a pair must exceed this IoU with a ground-truth pair to be a positive.
    pub target_iou: f64,
}

impl ModelConfig {
    pub fn new(d_model: usize, n_actions: usize) -> Self {
        Self {
            decoder: DecoderConfig::new(d_model, n_actions),
            unary_heads: 8,
            unary_ffn: 4 * d_model,
            unary_tau: 20.0,
            filter: FilterConfig::default(),
            focal: FocalConfig::default(),
            lambda: 0.26,
            target_iou: 0.5,
        }
    }

    pub fn d_model(&self) -> usize {
        self.decoder.d_model
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.focal.validate()?;
        if self.unary_heads == 0 || self.d_model() % self.unary_heads != 0 {
            return Err(Error::Invalid(format!("d_model {} not divisible by {} unary heads", self.d_model(), self.unary_heads)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.target_iou) {
            return Err(Error::Invalid(format!("target_iou {} outside [0, 1)", self.target_iou)));
        }
        if self.filter.min_n > self.filter.max_n {
            return Err(Error::Invalid("filter min_n exceeds max_n".into()));
        }
        Ok(())
    }

    /// Whether the decoder reads the feature map at all.
    pub fn uses_memory(&self) -> bool {
        self.decoder.cross_attn && self.decoder.n_layers > 0
    }
}

/// Detections of a sample after filtering, with their features read from the map.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub detections: Vec<Detection>,
    pub pairs: Vec<PairIndex>,
    /// `[n_pairs * n_actions]` action validity of each pair's object class.
    pub masks: Vec<bool>,
}

/// Row-major index of the cell holding the centre of `b`.
pub fn centre_cell(b: &BoxN, fm: &FeatureMap) -> (usize, usize) {
    let r = ((b.cy * fm.height() as f64).floor() as isize).clamp(0, fm.height() as isize - 1) as usize;
    let c = ((b.cx * fm.width() as f64).floor() as isize).clamp(0, fm.width() as isize - 1) as usize;
    (r, c)
}

/// Detection objects with the feature vector of each box's centre cell.
pub fn detections_from(set: &DetectionSet, fm: &FeatureMap) -> Result<Vec<Detection>> {
    set.validate()?;
    let size = (set.width, set.height);
    Ok((0..set.len())
        .map(|i| {
            let b = BoxN::from_pixels(set.boxes[i], set.width, set.height);
            let (r, c) = centre_cell(&b, fm);
            let feature = (0..fm.channels()).map(|ch| fm.get(ch, r, c)).collect();
            Detection::new(set.boxes[i], size, set.classes[i], set.scores[i], feature)
        })
        .collect())
}

pub fn prepare(set: &DetectionSet, fm: &FeatureMap, filter: &FilterConfig, table: &ActionTable) -> Result<PreparedImage> {
    let all = detections_from(set, fm)?;
    if let Some(d) = all.iter().find(|d| d.class_id >= table.n_obj_classes()) {
        return Err(Error::Invalid(format!("{}: object class {} unknown to the action table", set.image_id, d.class_id)));
    }
    let detections: Vec<Detection> = filter_indices(&all, filter).into_iter().map(|i| all[i].clone()).collect();
    let pairs = enumerate_pairs(&detections);
    let mut masks = Vec::with_capacity(pairs.len() * table.n_actions());
    for p in &pairs {
        masks.extend(action_mask(detections[p.o].class_id, table)?);
    }
    Ok(PreparedImage { detections, pairs, masks })
}

/// Graph nodes of one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub queries: QueryNodes,
    /// `[n_pairs, n_actions]`.
    pub logits: NodeId,
    /// Cross-attention weights per layer and head, each `[n_pairs, H*W]`.
    pub cross_weights: Vec<Vec<NodeId>>,
    pub record: Option<AttnRecord>,
}

/// Fused scores for one image.
#[derive(Clone, Debug)]
pub struct ImageScores {
    pub prepared: PreparedImage,
    /// `[n_pairs][n_actions]` sigmoid action scores.
    pub action: Vec<Vec<f64>>,
    /// `[n_pairs][n_actions]` fused scores; masked actions are zero.
    pub fused: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub unary: UnaryEncoder,
    pub queries: QueryBuilder,
    pub feature_head: Option<FeatureHead>,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model();
        let dc = &cfg.decoder;
        let unary = UnaryEncoder::new(store, "unary", d, cfg.unary_heads, cfg.unary_ffn, dc.activation, cfg.unary_tau, init)?;
        let queries = QueryBuilder::new(store, "query", d, dc.sinusoid, dc.activation, init)?;
        let feature_head = if dc.feature_head && cfg.uses_memory() {
            Some(FeatureHead::new(store, "feat", d, dc.n_heads, dc.ffn_hidden, dc.window, dc.sinusoid, dc.activation, init)?)
        } else {
            None
        };
        let decoder = Decoder::new(store, "dec", dc, init)?;
        Ok(Self { cfg: cfg.clone(), unary, queries, feature_head, decoder })
    }

    /// Forward pass over a prepared image; `None` when it has no pairs.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prep: &PreparedImage,
        fm: &FeatureMap,
        record: bool,
    ) -> Result<Option<ForwardPass>> {
        if prep.pairs.is_empty() {
            return Ok(None);
        }
        let d = self.cfg.d_model();
        if fm.channels() != d {
            return Err(shape_err("model", format!("feature map has {} channels, model expects {d}", fm.channels())));
        }
        let feats: Vec<f64> = prep.detections.iter().flat_map(|det| det.feature.iter().copied()).collect();
        let x = g.constant(crate::numcore::Tensor::new(vec![prep.detections.len(), d], feats)?)?;
        let boxes: Vec<BoxN> = prep.detections.iter().map(|det| det.bbox).collect();
        let (refined, _) = self.unary.forward(g, store, x, &boxes)?;
        let modulate = self.cfg.decoder.pe_mode.modulated();
        let queries = self
            .queries
            .build(g, store, refined, &prep.detections, &prep.pairs, modulate)?
            .expect("pairs are non-empty");
        let memory = if self.cfg.uses_memory() {
            Some(self.memory(g, store, fm)?)
        } else {
            None
        };
        let out = self.decoder.forward(g, store, queries.content, queries.pe, memory.as_ref(), record)?;
        Ok(Some(ForwardPass { queries, logits: out.logits, cross_weights: out.cross_weights, record: out.record }))
    }

    fn memory(&self, g: &mut Graph, store: &ParamStore, fm: &FeatureMap) -> Result<Memory> {
        let (h, w) = (fm.height(), fm.width());
        let mut tokens = g.constant(fm.tokens())?;
        if let Some(head) = &self.feature_head {
            tokens = head.forward(g, store, tokens, h, w)?;
        }
        self.decoder.memory(g, tokens, h, w)
    }

    /// Builds the focal loss of one sample. `None` when the image has no pairs.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, sample: &Sample, table: &ActionTable) -> Result<Option<NodeId>> {
        let prep = prepare(&sample.detections, &sample.features, &self.cfg.filter, table)?;
        let Some(pass) = self.forward(g, store, &prep, &sample.features, false)? else {
            return Ok(None);
        };
        let (w, h) = (sample.detections.width, sample.detections.height);
        let gt: Vec<(BoxN, BoxN, usize)> = sample
            .gt
            .iter()
            .filter_map(|p| {
                let o = p.o_box?;
                Some((BoxN::from_pixels(p.h_box, w, h), BoxN::from_pixels(o, w, h), p.action))
            })
            .collect();
        let targets = pair_targets(&pass.queries.boxes, &gt, table.n_actions(), self.cfg.target_iou);
        Ok(Some(focal_loss(g, pass.logits, &targets, &prep.masks, &self.cfg.focal)?))
    }

    /// Action and fused scores for every pair of an image, computed on `fm`
    /// (normally the sample's own feature map).
    pub fn score(&self, store: &ParamStore, set: &DetectionSet, fm: &FeatureMap, table: &ActionTable) -> Result<ImageScores> {
        let prepared = prepare(set, fm, &self.cfg.filter, table)?;
        let mut g = Graph::new();
        let Some(pass) = self.forward(&mut g, store, &prepared, fm, false)? else {
            return Ok(ImageScores { prepared, action: Vec::new(), fused: Vec::new() });
        };
        let logits = g.value(pass.logits);
        let na = table.n_actions();
        let mut action = Vec::with_capacity(prepared.pairs.len());
        let mut fused = Vec::with_capacity(prepared.pairs.len());
        for (i, p) in prepared.pairs.iter().enumerate() {
            let sa = action_scores(logits.row(i));
            let (dh, d_o) = (&prepared.detections[p.h], &prepared.detections[p.o]);
            let mut f = fuse_scores(dh.score, d_o.score, &sa, self.cfg.lambda)?;
            for (a, v) in f.iter_mut().enumerate() {
                if !prepared.masks[i * na + a] {
                    *v = 0.0;
                }
            }
            action.push(sa);
            fused.push(f);
        }
        Ok(ImageScores { prepared, action, fused })
    }

    /// Evaluation records for every pair and every valid action of its object.
    pub fn infer_sample(&self, store: &ParamStore, sample: &Sample, table: &ActionTable) -> Result<Vec<EvalRecord>> {
        let scores = self.score(store, &sample.detections, &sample.features, table)?;
        Ok(records_from(sample.image_id(), &scores, table))
    }
}

pub fn records_from(image_id: &str, scores: &ImageScores, table: &ActionTable) -> Vec<EvalRecord> {
    let prep = &scores.prepared;
    let mut out = Vec::new();
    for (i, p) in prep.pairs.iter().enumerate() {
        let (dh, d_o) = (&prep.detections[p.h], &prep.detections[p.o]);
        for a in 0..table.n_actions() {
            if prep.masks[i * table.n_actions() + a] {
                out.push(EvalRecord {
                    image_id: image_id.to_string(),
                    h_box: dh.pixel_box,
                    o_box: Some(d_o.pixel_box),
                    object_class: d_o.class_id,
                    action: a,
                    score: scores.fused[i][a],
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasyn::{generate, SynthConfig};
    use crate::numcore::SeededRng;

    fn setup(n_layers: usize) -> (Model, ParamStore, crate::dataset::Dataset) {
        let syn = SynthConfig { n_train: 3, n_test: 2, channels: 16, ..SynthConfig::default() };
        let ds = generate(&syn).unwrap();
        let mut cfg = ModelConfig::new(16, syn.n_actions());
        cfg.decoder.n_layers = n_layers;
        cfg.decoder.n_heads = 2;
        cfg.unary_heads = 2;
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(3);
        let model = Model::new(&mut store, &cfg, &mut Init { rng: &mut rng, std: 0.02 }).unwrap();
        (model, store, ds)
    }

    #[test]
    fn record_count_matches_valid_actions() {
        let (model, store, ds) = setup(1);
        for s in &ds.test {
            let recs = model.infer_sample(&store, s, &ds.table).unwrap();
            let prep = prepare(&s.detections, &s.features, &model.cfg.filter, &ds.table).unwrap();
            let expected: usize = prep.pairs.iter().map(|p| ds.table.valid_actions(prep.detections[p.o].class_id).len()).sum();
            assert_eq!(recs.len(), expected);
            assert!(recs.iter().all(|r| ds.table.is_valid(r.object_class, r.action)));
        }
    }

    #[test]
    fn lambda_zero_gives_detector_scores() {
        let (mut model, store, ds) = setup(1);
        model.cfg.lambda = 0.0;
        let s = &ds.test[0];
        let scores = model.score(&store, &s.detections, &s.features, &ds.table).unwrap();
        for (i, p) in scores.prepared.pairs.iter().enumerate() {
            let base = scores.prepared.detections[p.h].score * scores.prepared.detections[p.o].score;
            for a in 0..ds.table.n_actions() {
                if scores.prepared.masks[i * ds.table.n_actions() + a] {
                    assert_eq!(scores.fused[i][a], base);
                }
            }
        }
    }

    #[test]
    fn detection_features_come_from_centre_cells() {
        let (_, _, ds) = setup(0);
        let s = &ds.train[0];
        let dets = detections_from(&s.detections, &s.features).unwrap();
        for d in &dets {
            let (r, c) = centre_cell(&d.bbox, &s.features);
            assert_eq!(d.feature[5], s.features.get(5, r, c));
        }
    }

    #[test]
    fn loss_is_finite_and_every_parameter_in_use_gets_a_gradient() {
        let (model, store, ds) = setup(2);
        let mut g = Graph::new();
        let l = model.loss(&mut g, &store, &ds.train[0], &ds.table).unwrap().unwrap();
        assert!(g.value(l).item().is_finite());
        let grads = g.backward(l).unwrap();
        let n = grads.iter().count();
        assert_eq!(n, store.len());
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let (model, store, ds) = setup(1);
        let s = &ds.train[0];
        let prep = prepare(&s.detections, &s.features, &model.cfg.filter, &ds.table).unwrap();
        let fm = FeatureMap::new(crate::numcore::Tensor::zeros(&[8, 16, 16]), 32).unwrap();
        let mut g = Graph::new();
        assert!(matches!(model.forward(&mut g, &store, &prep, &fm, false), Err(Error::Shape { .. })));
    }
}
