//! Detection-protocol evaluation of interaction predictions: pair matching,
//! all-point average precision, HICO-DET style mAP and V-COCO role AP.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{format_err, Error, Result};
use crate::objective::ActionTable;

/// `[x1, y1, x2, y2]` in pixels.
pub type PixelBox = [f64; 4];

/// Intersection over union of two pixel boxes.
pub fn iou(a: &PixelBox, b: &PixelBox) -> Result<f64> {
    for bx in [a, b] {
        if !(bx[0] <= bx[2] && bx[1] <= bx[3]) || bx.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("malformed box {bx:?}")));
        }
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

/// A ground-truth interaction. `o_box` is `None` when the object is absent
/// or occluded.
#[derive(Clone, Debug, PartialEq)]
pub struct GtPair {
    pub image_id: String,
    pub h_box: PixelBox,
    pub o_box: Option<PixelBox>,
    pub object_class: usize,
    pub action: usize,
}

/// A scored prediction. `o_box` is `None` for the empty-box sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub image_id: String,
    pub h_box: PixelBox,
    pub o_box: Option<PixelBox>,
    pub object_class: usize,
    pub action: usize,
    pub score: f64,
}

/// Rare interaction classes; every other class is non-rare.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassSplit {
    pub rare: BTreeSet<usize>,
}

impl ClassSplit {
    pub fn is_rare(&self, class: usize) -> bool {
        self.rare.contains(&class)
    }

    /// Whitespace- or newline-separated interaction ids; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rare = BTreeSet::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("");
            for tok in line.split_whitespace() {
                rare.insert(tok.parse().map_err(|_| format_err("split file", format!("bad id `{tok}`")))?);
            }
        }
        Ok(Self { rare })
    }

    pub fn to_text(&self) -> String {
        self.rare.iter().map(|c| format!("{c}\n")).collect()
    }
}

/// How a record's object box is compared with a ground-truth object box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectRule {
    /// Both boxes must be present.
    Present,
    /// An absent ground-truth object matches only the empty-box sentinel.
    SentinelForAbsent,
    /// An absent ground-truth object matches any record.
    IgnoreAbsent,
}

fn object_iou(rec: &Option<PixelBox>, gt: &Option<PixelBox>, rule: ObjectRule) -> Result<f64> {
    Ok(match (rec, gt) {
        (Some(r), Some(g)) => iou(r, g)?,
        (None, None) if rule != ObjectRule::Present => 1.0,
        (Some(_), None) if rule == ObjectRule::IgnoreAbsent => 1.0,
        _ => 0.0,
    })
}

/// Record indices by descending score, ties by input order.
pub fn score_order(records: &[EvalRecord]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| records[b].score.total_cmp(&records[a].score).then(a.cmp(&b)));
    idx
}

/// Greedy true-positive labels, aligned with `records`.
///
/// Records are visited by descending score. Each takes the unmatched
/// ground truth of the same image and group key that maximises
/// `min(iou_h, iou_o)`, provided both exceed `thresh`.
pub fn match_with<K: Eq + std::hash::Hash>(
    records: &[EvalRecord],
    gts: &[GtPair],
    thresh: f64,
    rule: ObjectRule,
    rec_key: impl Fn(&EvalRecord) -> K,
    gt_key: impl Fn(&GtPair) -> K,
) -> Result<Vec<bool>> {
    let mut by_key: HashMap<(&str, K), Vec<usize>> = HashMap::new();
    for (j, g) in gts.iter().enumerate() {
        by_key.entry((g.image_id.as_str(), gt_key(g))).or_default().push(j);
    }
    let mut taken = vec![false; gts.len()];
    let mut labels = vec![false; records.len()];
    for i in score_order(records) {
        let r = &records[i];
        let Some(cands) = by_key.get(&(r.image_id.as_str(), rec_key(r))) else { continue };
        let mut best: Option<(usize, f64)> = None;
        for &j in cands {
            if taken[j] {
                continue;
            }
            let ih = iou(&r.h_box, &gts[j].h_box)?;
            let io = object_iou(&r.o_box, &gts[j].o_box, rule)?;
            if ih > thresh && io > thresh {
                let q = ih.min(io);
                if best.map_or(true, |(_, b)| q > b) {
                    best = Some((j, q));
                }
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            labels[i] = true;
        }
    }
    Ok(labels)
}

/// Matching by image and `(object_class, action)` with both boxes required.
pub fn match_pairs(records: &[EvalRecord], gts: &[GtPair], iou_thresh: f64) -> Result<Vec<bool>> {
    match_with(records, gts, iou_thresh, ObjectRule::Present, |r| (r.object_class, r.action), |g| (g.object_class, g.action))
}

/// All-point interpolated AP of labels given in descending score order.
pub fn average_precision(labels: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(labels.len());
    let mut recall = Vec::with_capacity(labels.len());
    let mut tp = 0usize;
    for (k, &l) in labels.iter().enumerate() {
        tp += l as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..labels.len() {
        if recall[k] > prev {
            ap += (recall[k] - prev) * precision[k];
            prev = recall[k];
        }
    }
    ap
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HicoSetting {
    Default,
    KnownObjects,
}

impl std::str::FromStr for HicoSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(HicoSetting::Default),
            "known-objects" | "known_objects" => Ok(HicoSetting::KnownObjects),
            _ => Err(Error::Invalid(format!("unknown evaluation setting `{s}`"))),
        }
    }
}

/// Mean AP in percent over interaction classes present in the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    pub full: f64,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
    /// AP in percent per interaction class present in the ground truth.
    pub per_class: BTreeMap<usize, f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Records kept by the known-objects setting: those whose object class
/// occurs in the ground truth of their image.
pub fn known_objects_filter(records: &[EvalRecord], gts: &[GtPair]) -> Vec<EvalRecord> {
    let mut present: HashMap<&str, BTreeSet<usize>> = HashMap::new();
    for g in gts {
        present.entry(g.image_id.as_str()).or_default().insert(g.object_class);
    }
    records
        .iter()
        .filter(|r| present.get(r.image_id.as_str()).is_some_and(|s| s.contains(&r.object_class)))
        .cloned()
        .collect()
}

fn class_aps<K: Ord + Copy + std::hash::Hash>(
    records: &[EvalRecord],
    gts: &[GtPair],
    rule: ObjectRule,
    rec_key: impl Fn(&EvalRecord) -> Option<K>,
    gt_key: impl Fn(&GtPair) -> Option<K>,
) -> Result<BTreeMap<K, f64>> {
    let mut n_gt: BTreeMap<K, usize> = BTreeMap::new();
    for g in gts {
        if let Some(k) = gt_key(g) {
            *n_gt.entry(k).or_default() += 1;
        }
    }
    let keyed: Vec<EvalRecord> = records.iter().filter(|r| rec_key(r).is_some_and(|k| n_gt.contains_key(&k))).cloned().collect();
    let labels = match_with(&keyed, gts, 0.5, rule, |r| rec_key(r), |g| gt_key(g))?;
    let mut per: BTreeMap<K, Vec<bool>> = n_gt.keys().map(|&k| (k, Vec::new())).collect();
    for i in score_order(&keyed) {
        per.get_mut(&rec_key(&keyed[i]).expect("filtered")).expect("present").push(labels[i]);
    }
    Ok(per.into_iter().map(|(k, l)| (k, 100.0 * average_precision(&l, n_gt[&k]))).collect())
}

/// HICO-DET style mAP over the interaction classes of `table`.
pub fn hico_map(
    records: &[EvalRecord],
    gts: &[GtPair],
    table: &ActionTable,
    split: &ClassSplit,
    setting: HicoSetting,
) -> Result<MapResult> {
    if gts.is_empty() {
        return Err(Error::Invalid("no ground truth to evaluate against".into()));
    }
    let filtered;
    let records = match setting {
        HicoSetting::Default => records,
        HicoSetting::KnownObjects => {
            filtered = known_objects_filter(records, gts);
            &filtered
        }
    };
    let per_class = class_aps(
        records,
        gts,
        ObjectRule::Present,
        |r| table.interaction_id(r.object_class, r.action),
        |g| table.interaction_id(g.object_class, g.action),
    )?;
    if per_class.is_empty() {
        return Err(Error::Invalid("ground truth contains no valid interaction class".into()));
    }
    Ok(MapResult {
        full: mean(per_class.values().copied()).expect("non-empty"),
        rare: mean(per_class.iter().filter(|(c, _)| split.is_rare(**c)).map(|(_, v)| *v)),
        non_rare: mean(per_class.iter().filter(|(c, _)| !split.is_rare(**c)).map(|(_, v)| *v)),
        per_class,
    })
}

/// Role AP in percent per action present in the ground truth.
pub fn vcoco_role_aps(records: &[EvalRecord], gts: &[GtPair], scenario: u8) -> Result<BTreeMap<usize, f64>> {
    let rule = match scenario {
        1 => ObjectRule::SentinelForAbsent,
        2 => ObjectRule::IgnoreAbsent,
        _ => return Err(Error::Invalid(format!("scenario must be 1 or 2, got {scenario}"))),
    };
    if gts.is_empty() {
        return Err(Error::Invalid("no ground truth to evaluate against".into()));
    }
    class_aps(records, gts, rule, |r| Some(r.action), |g| Some(g.action))
}

/// Mean role AP in percent under V-COCO scenario 1 or 2.
pub fn vcoco_role_ap(records: &[EvalRecord], gts: &[GtPair], scenario: u8) -> Result<f64> {
    let aps = vcoco_role_aps(records, gts, scenario)?;
    Ok(mean(aps.values().copied()).unwrap_or(0.0))
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    image_id: String,
    h_box: PixelBox,
    o_box: PixelBox,
    #[serde(default)]
    o_empty: bool,
    object_class: usize,
    action_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    occluded: Option<bool>,
}

fn split_box(b: Option<PixelBox>) -> (PixelBox, bool) {
    match b {
        Some(b) => (b, false),
        None => ([0.0; 4], true),
    }
}

fn write_lines<W: Write, T: Serialize>(mut w: W, items: impl Iterator<Item = T>) -> Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, &it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines<R: BufRead>(r: R, what: &'static str) -> Result<Vec<RecordLine>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format_err(what, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

/// One JSON object per line: `image_id, h_box, o_box, o_empty, object_class,
/// action_id, score`. The empty-box sentinel is `o_box = [0,0,0,0]` with
/// `o_empty = true`.
pub fn write_results<W: Write>(w: W, records: &[EvalRecord]) -> Result<()> {
    write_lines(
        w,
        records.iter().map(|r| {
            let (o_box, o_empty) = split_box(r.o_box);
            RecordLine {
                image_id: r.image_id.clone(),
                h_box: r.h_box,
                o_box,
                o_empty,
                object_class: r.object_class,
                action_id: r.action,
                score: Some(r.score),
                occluded: None,
            }
        }),
    )
}

pub fn read_results<R: BufRead>(r: R) -> Result<Vec<EvalRecord>> {
    read_lines(r, "results file")?
        .into_iter()
        .map(|l| {
            let score = l.score.ok_or_else(|| format_err("results file", "record without score"))?;
            if !(0.0..=1.0).contains(&score) {
                return Err(format_err("results file", format!("score {score} outside [0, 1]")));
            }
            Ok(EvalRecord {
                image_id: l.image_id,
                h_box: l.h_box,
                o_box: (!l.o_empty).then_some(l.o_box),
                object_class: l.object_class,
                action: l.action_id,
                score,
            })
        })
        .collect()
}

/// Same layout as the results file without `score`, plus `occluded`.
pub fn write_gt<W: Write>(w: W, gts: &[GtPair]) -> Result<()> {
    write_lines(
        w,
        gts.iter().map(|g| {
            let (o_box, o_empty) = split_box(g.o_box);
            RecordLine {
                image_id: g.image_id.clone(),
                h_box: g.h_box,
                o_box,
                o_empty,
                object_class: g.object_class,
                action_id: g.action,
                score: None,
                occluded: Some(o_empty),
            }
        }),
    )
}

pub fn read_gt<R: BufRead>(r: R) -> Result<Vec<GtPair>> {
    Ok(read_lines(r, "ground-truth file")?
        .into_iter()
        .map(|l| {
            let absent = l.o_empty || l.occluded.unwrap_or(false);
            GtPair {
                image_id: l.image_id,
                h_box: l.h_box,
                o_box: (!absent).then_some(l.o_box),
                object_class: l.object_class,
                action: l.action_id,
            }
        })
        .collect())
}
