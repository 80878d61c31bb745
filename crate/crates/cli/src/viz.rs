//! Attention-term heatmaps for one pair, layer and head.

use pvic::dataset::Sample;
use pvic::decoder::{AttnRecord, AttnTerms};
use pvic::model::{prepare, Model, PreparedImage};
use pvic::numcore::{Graph, ParamStore, Tensor};
use pvic::objective::ActionTable;

use crate::error::CliError;
use crate::heatmap::HeatmapImage;

const HUMAN_COLOUR: [u8; 3] = [0, 255, 0];
const OBJECT_COLOUR: [u8; 3] = [0, 128, 255];
const OVERLAY_SCALE: usize = 16;

/// Forward pass with every cross-attention term recorded. The cross terms
/// are recorded in all modes without changing the logits.
pub fn record_attention(model: &Model, store: &ParamStore, sample: &Sample, table: &ActionTable) -> Result<(PreparedImage, AttnRecord), CliError> {
    if !model.cfg.uses_memory() {
        return Err(CliError::Config("the model has no cross-attention to visualise".into()));
    }
    let mut model = model.clone();
    for layer in &mut model.decoder.layers {
        if let Some((_, cross)) = layer.cross.as_mut() {
            cross.diagnose_cross = true;
        }
    }
    let prep = prepare(&sample.detections, &sample.features, &model.cfg.filter, table)?;
    let mut g = Graph::new();
    let pass = model
        .forward(&mut g, store, &prep, &sample.features, true)?
        .ok_or_else(|| CliError::Config(format!("{} has no human-object pairs", sample.image_id())))?;
    let record = pass.record.expect("recording was requested");
    Ok((prep, record))
}

pub fn file_stem(pair: usize, layer: usize, head: usize) -> String {
    format!("pair{pair}_layer{layer}_head{head}")
}

/// Per-cell squared norm of the feature map, `[H, W]`.
pub fn feature_energy(sample: &Sample) -> Tensor {
    let fm = &sample.features;
    let (h, w) = (fm.height(), fm.width());
    Tensor::from_fn(&[h, w], |i| (0..fm.channels()).map(|c| fm.get(c, i / w, i % w).powi(2)).sum())
}

/// Raw and softmax-normalised maps of the five terms plus an overlay of the
/// normalised combined map, named by pair, layer, head and term.
pub fn attention_images(
    sample: &Sample,
    prep: &PreparedImage,
    record: &AttnRecord,
    pair: usize,
    layer: usize,
    head: usize,
) -> Result<Vec<(String, HeatmapImage)>, CliError> {
    if pair >= prep.pairs.len() {
        return Err(CliError::Config(format!("pair {pair} out of range, the image has {} pairs", prep.pairs.len())));
    }
    let terms = record.attention_terms(pair, layer, head)?;
    let stem = file_stem(pair, layer, head);
    let tag = |img: HeatmapImage, term: &str, norm: &str| {
        img.with_note("image", sample.image_id())
            .with_note("pair", pair)
            .with_note("layer", layer)
            .with_note("head", head)
            .with_note("term", term)
            .with_note("normalisation", norm)
            .with_note("mode", record.mode)
    };
    let mut out = Vec::new();
    for (name, map) in terms.maps() {
        out.push((format!("{stem}_{name}_raw.pgm"), tag(HeatmapImage::gray(map)?, name, "raw")));
    }
    for (name, map) in terms.maps() {
        let soft = AttnTerms::normalised(map);
        out.push((format!("{stem}_{name}_softmax.pgm"), tag(HeatmapImage::gray(&soft)?, name, "softmax")));
    }
    let p = prep.pairs[pair];
    let boxes = [(prep.detections[p.h].bbox, HUMAN_COLOUR), (prep.detections[p.o].bbox, OBJECT_COLOUR)];
    let outlines: Vec<([f64; 4], [u8; 3])> = boxes.iter().map(|(b, c)| ([b.x1(), b.y1(), b.x2(), b.y2()], *c)).collect();
    let soft = AttnTerms::normalised(&terms.combined);
    let overlay = HeatmapImage::overlay(&feature_energy(sample), &soft, OVERLAY_SCALE, &outlines)?;
    out.push((format!("{stem}_overlay.ppm"), tag(overlay, "combined", "softmax")));
    Ok(out)
}
