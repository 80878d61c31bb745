//! Masking probe: zero the feature cells a pair attends to most and measure
//! how much its top fused score drops.

use pvic::dataset::Sample;
use pvic::decoder::FeatureMap;
use pvic::model::Model;
use pvic::numcore::{Graph, ParamStore, SeededRng};
use pvic::objective::ActionTable;
use serde::Serialize;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub pair: usize,
    pub action: usize,
    pub orig_score: f64,
    pub masked_score: f64,
    /// Row-major cell indices that were zeroed.
    pub mask_cells: Vec<usize>,
}

/// Final-layer cross-attention weights of `pair`, averaged over heads, `[H*W]`.
pub fn pair_attention(model: &Model, store: &ParamStore, sample: &Sample, table: &ActionTable, pair: usize) -> Result<Vec<f64>, CliError> {
    if !model.cfg.uses_memory() {
        return Err(CliError::Config("the model has no cross-attention to probe".into()));
    }
    let prep = pvic::model::prepare(&sample.detections, &sample.features, &model.cfg.filter, table)?;
    check_pair(pair, prep.pairs.len())?;
    let mut g = Graph::new();
    let pass = model.forward(&mut g, store, &prep, &sample.features, false)?.expect("pairs are non-empty");
    let heads = pass.cross_weights.last().expect("uses_memory implies a layer");
    let mut acc = vec![0.0; sample.features.cells()];
    for &h in heads {
        for (a, v) in acc.iter_mut().zip(g.value(h).row(pair)) {
            *a += v / heads.len() as f64;
        }
    }
    Ok(acc)
}

fn check_pair(pair: usize, n: usize) -> Result<(), CliError> {
    if pair >= n {
        return Err(CliError::Config(format!("pair {pair} out of range, the image has {n} pairs")));
    }
    Ok(())
}

/// Number of cells masked for `fraction`, which must lie in (0, 1).
pub fn cell_count(fraction: f64, cells: usize) -> Result<usize, CliError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CliError::Config(format!("mask fraction must lie in (0, 1), got {fraction}")));
    }
    Ok((fraction * cells as f64).round() as usize)
}

/// Top fused action of `pair` and its score.
fn top_action(model: &Model, store: &ParamStore, sample: &Sample, fm: &FeatureMap, table: &ActionTable, pair: usize) -> Result<(usize, f64), CliError> {
    let scores = model.score(store, &sample.detections, fm, table)?;
    check_pair(pair, scores.fused.len())?;
    let row = &scores.fused[pair];
    let a = (0..row.len()).fold(0, |best, a| if row[a] > row[best] { a } else { best });
    Ok((a, row[a]))
}

fn rescore(model: &Model, store: &ParamStore, sample: &Sample, table: &ActionTable, pair: usize, action: usize, cells: &[usize]) -> Result<f64, CliError> {
    let mut fm = sample.features.clone();
    fm.zero_cells(cells);
    let scores = model.score(store, &sample.detections, &fm, table)?;
    check_pair(pair, scores.fused.len())?;
    Ok(scores.fused[pair][action])
}

/// Masks the top `fraction` of cells by attention weight and rescores the
/// pair's top action.
pub fn mask_probe(model: &Model, store: &ParamStore, sample: &Sample, table: &ActionTable, pair: usize, fraction: f64) -> Result<ProbeResult, CliError> {
    let k = cell_count(fraction, sample.features.cells())?;
    let (action, orig_score) = top_action(model, store, sample, &sample.features, table, pair)?;
    let attn = pair_attention(model, store, sample, table, pair)?;
    let mut order: Vec<usize> = (0..attn.len()).collect();
    order.sort_by(|&a, &b| attn[b].total_cmp(&attn[a]).then(a.cmp(&b)));
    order.truncate(k);
    let masked_score = rescore(model, store, sample, table, pair, action, &order)?;
    Ok(ProbeResult { pair, action, orig_score, masked_score, mask_cells: order })
}

/// Same as [`mask_probe`] but masks uniformly random cells of the same count.
pub fn random_mask_probe(
    model: &Model,
    store: &ParamStore,
    sample: &Sample,
    table: &ActionTable,
    pair: usize,
    fraction: f64,
    rng: &mut SeededRng,
) -> Result<ProbeResult, CliError> {
    let k = cell_count(fraction, sample.features.cells())?;
    let (action, orig_score) = top_action(model, store, sample, &sample.features, table, pair)?;
    let mut cells: Vec<usize> = (0..sample.features.cells()).collect();
    rng.shuffle(&mut cells);
    cells.truncate(k);
    let masked_score = rescore(model, store, sample, table, pair, action, &cells)?;
    Ok(ProbeResult { pair, action, orig_score, masked_score, mask_cells: cells })
}
