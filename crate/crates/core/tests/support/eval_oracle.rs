//! Brute-force re-implementation of the evaluation protocol, written without
//! reference to the library's data structures beyond the record types.

#![allow(dead_code)]

use pvic::eval::{EvalRecord, GtPair, PixelBox};
use pvic::numcore::SeededRng;
use pvic::objective::ActionTable;

pub fn box_iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let overlap = |lo1: f64, hi1: f64, lo2: f64, hi2: f64| (hi1.min(hi2) - lo1.max(lo2)).max(0.0);
    let inter = overlap(a[0], a[2], b[0], b[2]) * overlap(a[1], a[3], b[1], b[3]);
    let area = |x: &PixelBox| (x[2] - x[0]) * (x[3] - x[1]);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Precision envelope integrated at every true positive:
/// `AP = sum over TP ranks k of max_{j >= k} precision(j) / n_gt`.
pub fn ap(labels: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let n = labels.len();
    let prec: Vec<f64> = (0..n)
        .map(|k| labels[..=k].iter().filter(|&&l| l).count() as f64 / (k + 1) as f64)
        .collect();
    let mut total = 0.0;
    for k in 0..n {
        if labels[k] {
            total += prec[k..].iter().cloned().fold(0.0, f64::max);
        }
    }
    total / n_gt as f64
}

/// Object condition: `0` = both boxes required, `1` = scenario 1, `2` = scenario 2.
fn object_ok(r: &EvalRecord, g: &GtPair, rule: u8) -> (bool, f64) {
    match (&r.o_box, &g.o_box) {
        (Some(a), Some(b)) => {
            let v = box_iou(a, b);
            (v > 0.5, v)
        }
        (None, None) => (rule != 0, 1.0),
        (Some(_), None) => (rule == 2, 1.0),
        (None, Some(_)) => (false, 0.0),
    }
}

/// Labels for the records of one class, returned in descending-score order.
fn class_labels(recs: &[&EvalRecord], gts: &[&GtPair], rule: u8) -> Vec<bool> {
    let mut visited = vec![false; recs.len()];
    let mut used = vec![false; gts.len()];
    let mut labels = Vec::new();
    for _ in 0..recs.len() {
        // selection of the highest remaining score, earliest index first
        let mut pick = None;
        for i in 0..recs.len() {
            if !visited[i] && pick.map_or(true, |p: usize| recs[i].score > recs[p].score) {
                pick = Some(i);
            }
        }
        let i = pick.unwrap();
        visited[i] = true;
        let r = recs[i];
        let mut best = None;
        let mut best_q = -1.0;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.image_id != r.image_id {
                continue;
            }
            let ih = box_iou(&r.h_box, &g.h_box);
            let (ok, io) = object_ok(r, g, rule);
            if ih > 0.5 && ok && ih.min(io) > best_q {
                best_q = ih.min(io);
                best = Some(j);
            }
        }
        if let Some(j) = best {
            used[j] = true;
        }
        labels.push(best.is_some());
    }
    labels
}

pub struct OracleMap {
    pub full: f64,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
}

fn avg(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn hico_map(recs: &[EvalRecord], gts: &[GtPair], table: &ActionTable, rare: &[usize], known_objects: bool) -> OracleMap {
    let mut all = Vec::new();
    let mut r_aps = Vec::new();
    let mut n_aps = Vec::new();
    for (id, (c, a)) in table.interactions().into_iter().enumerate() {
        let g: Vec<&GtPair> = gts.iter().filter(|g| g.object_class == c && g.action == a).collect();
        if g.is_empty() {
            continue;
        }
        let r: Vec<&EvalRecord> = recs
            .iter()
            .filter(|r| r.object_class == c && r.action == a)
            .filter(|r| !known_objects || gts.iter().any(|g| g.image_id == r.image_id && g.object_class == r.object_class))
            .collect();
        let v = 100.0 * ap(&class_labels(&r, &g, 0), g.len());
        all.push(v);
        if rare.contains(&id) {
            r_aps.push(v);
        } else {
            n_aps.push(v);
        }
    }
    OracleMap { full: avg(&all).unwrap_or(0.0), rare: avg(&r_aps), non_rare: avg(&n_aps) }
}

pub fn vcoco(recs: &[EvalRecord], gts: &[GtPair], n_actions: usize, scenario: u8) -> f64 {
    let mut aps = Vec::new();
    for a in 0..n_actions {
        let g: Vec<&GtPair> = gts.iter().filter(|g| g.action == a).collect();
        if g.is_empty() {
            continue;
        }
        let r: Vec<&EvalRecord> = recs.iter().filter(|r| r.action == a).collect();
        aps.push(100.0 * ap(&class_labels(&r, &g, scenario), g.len()));
    }
    avg(&aps).unwrap_or(0.0)
}

pub struct Instance {
    pub table: ActionTable,
    pub rare: Vec<usize>,
    pub gts: Vec<GtPair>,
    pub recs: Vec<EvalRecord>,
}

fn rand_box(rng: &mut SeededRng) -> PixelBox {
    let x = rng.uniform_in(0.0, 80.0);
    let y = rng.uniform_in(0.0, 80.0);
    [x, y, x + rng.uniform_in(5.0, 40.0), y + rng.uniform_in(5.0, 40.0)]
}

fn jitter(b: &PixelBox, rng: &mut SeededRng, s: f64) -> PixelBox {
    let mut out = *b;
    for v in &mut out {
        *v += rng.uniform_in(-s, s);
    }
    [out[0].min(out[2]), out[1].min(out[3]), out[0].max(out[2]), out[1].max(out[3])]
}

/// Random instance: at most 10 images, 20 records and 5 object classes, with
/// occluded objects, empty-box records and tied scores.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = SeededRng::new(seed);
    let n_classes = rng.int_in(1, 5);
    let n_actions = rng.int_in(1, 4);
    let lists: Vec<Vec<usize>> = (0..n_classes)
        .map(|_| {
            let mut l: Vec<usize> = (0..n_actions).filter(|_| rng.bernoulli(0.6)).collect();
            if l.is_empty() {
                l.push(rng.below(n_actions));
            }
            l
        })
        .collect();
    let table = ActionTable::from_lists(n_actions, &lists).unwrap();
    let n_inter = table.interactions().len();
    let rare: Vec<usize> = (0..n_inter).filter(|_| rng.bernoulli(0.3)).collect();
    let n_images = rng.int_in(1, 10);
    let mut gts = Vec::new();
    for _ in 0..rng.int_in(1, 15) {
        let (c, a) = table.interactions()[rng.below(n_inter)];
        gts.push(GtPair {
            image_id: format!("im{}", rng.below(n_images)),
            h_box: rand_box(&mut rng),
            o_box: if rng.bernoulli(0.2) { None } else { Some(rand_box(&mut rng)) },
            object_class: c,
            action: a,
        });
    }
    let mut recs = Vec::new();
    for _ in 0..rng.int_in(0, 20) {
        let score = (rng.uniform() * 5.0).floor() / 5.0 + 0.1;
        let rec = if rng.bernoulli(0.7) {
            let g = &gts[rng.below(gts.len())];
            let o_box = match g.o_box {
                Some(b) => (!rng.bernoulli(0.1)).then(|| jitter(&b, &mut rng, 4.0)),
                None => rng.bernoulli(0.5).then(|| rand_box(&mut rng)),
            };
            let (c, a) = if rng.bernoulli(0.8) { (g.object_class, g.action) } else { table.interactions()[rng.below(n_inter)] };
            EvalRecord { image_id: g.image_id.clone(), h_box: jitter(&g.h_box, &mut rng, 4.0), o_box, object_class: c, action: a, score }
        } else {
            let (c, a) = table.interactions()[rng.below(n_inter)];
            EvalRecord {
                image_id: format!("im{}", rng.below(n_images)),
                h_box: rand_box(&mut rng),
                o_box: Some(rand_box(&mut rng)),
                object_class: c,
                action: a,
                score,
            }
        };
        recs.push(rec);
    }
    Instance { table, rare, gts, recs }
}
