//! Focal loss with per-object action masking, training targets and
//! inference-time score fusion.

use std::fmt::Write as _;

use crate::error::{format_err, Error, Result};
use crate::numcore::{sigmoid, Graph, NodeId, Tensor};
use crate::pairing::box_iou;
use crate::posembed::BoxN;

/// Which actions are valid for each object class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionTable {
    n_actions: usize,
    valid: Vec<Vec<bool>>,
}

impl ActionTable {
    pub fn new(n_actions: usize, valid: Vec<Vec<bool>>) -> Result<Self> {
        if valid.is_empty() {
            return Err(Error::Invalid("action table has no object classes".into()));
        }
        for (c, row) in valid.iter().enumerate() {
            if row.len() != n_actions {
                return Err(Error::Invalid(format!("class {c} has {} entries, expected {n_actions}", row.len())));
            }
            if !row.iter().any(|&v| v) {
                return Err(Error::Invalid(format!("class {c} has no valid action")));
            }
        }
        Ok(Self { n_actions, valid })
    }

    /// Builds a table from the valid action ids of each class.
    pub fn from_lists(n_actions: usize, lists: &[Vec<usize>]) -> Result<Self> {
        let mut valid = vec![vec![false; n_actions]; lists.len()];
        for (c, list) in lists.iter().enumerate() {
            for &a in list {
                if a >= n_actions {
                    return Err(Error::Invalid(format!("class {c} lists action {a} of {n_actions}")));
                }
                valid[c][a] = true;
            }
        }
        Self::new(n_actions, valid)
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_obj_classes(&self) -> usize {
        self.valid.len()
    }

    pub fn is_valid(&self, class: usize, action: usize) -> bool {
        self.valid.get(class).and_then(|r| r.get(action)).copied().unwrap_or(false)
    }

    pub fn valid_actions(&self, class: usize) -> Vec<usize> {
        (0..self.n_actions).filter(|&a| self.is_valid(class, a)).collect()
    }

    /// Interaction classes as `(object_class, action)`, object-major.
    pub fn interactions(&self) -> Vec<(usize, usize)> {
        (0..self.n_obj_classes()).flat_map(|c| self.valid_actions(c).into_iter().map(move |a| (c, a))).collect()
    }

    /// Index of `(object_class, action)` in [`ActionTable::interactions`].
    pub fn interaction_id(&self, class: usize, action: usize) -> Option<usize> {
        if !self.is_valid(class, action) {
            return None;
        }
        let before: usize = self.valid[..class].iter().map(|r| r.iter().filter(|&&v| v).count()).sum();
        Some(before + self.valid[class][..action].iter().filter(|&&v| v).count())
    }

    /// One line per class: `class_id: a,b,...`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in 0..self.n_obj_classes() {
            let list: Vec<String> = self.valid_actions(c).iter().map(|a| a.to_string()).collect();
            let _ = writeln!(s, "{c}: {}", list.join(","));
        }
        s
    }

    /// Parses [`ActionTable::to_text`] output; classes must appear in order.
    pub fn parse(text: &str, n_actions: usize) -> Result<Self> {
        let mut lists = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |detail: String| format_err("action table", format!("line {}: {detail}", lineno + 1));
            let (class, rest) = line.split_once(':').ok_or_else(|| bad("expected `class_id: a,b`".into()))?;
            let class: usize = class.trim().parse().map_err(|_| bad(format!("bad class id `{class}`")))?;
            if class != lists.len() {
                return Err(bad(format!("class {class} out of order")));
            }
            let list = rest
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<usize>().map_err(|_| bad(format!("bad action id `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            lists.push(list);
        }
        Self::from_lists(n_actions, &lists)
    }
}

/// Valid-action row of `table` for `object_class`.
pub fn action_mask(object_class: usize, table: &ActionTable) -> Result<Vec<bool>> {
    if object_class >= table.n_obj_classes() {
        return Err(Error::Invalid(format!("object class {object_class} of {}", table.n_obj_classes())));
    }
    Ok(table.valid[object_class].clone())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { alpha: 0.5, gamma: 0.1 }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.gamma >= 0.0) {
            return Err(Error::Invalid(format!("focal alpha {} / gamma {} out of range", self.alpha, self.gamma)));
        }
        Ok(())
    }
}

/// Differentiable focal loss over `[n, a]` logits, summed over unmasked cells
/// and divided by `max(1, #unmasked positives)`.
pub fn focal_loss(g: &mut Graph, logits: NodeId, targets: &[bool], masks: &[bool], cfg: &FocalConfig) -> Result<NodeId> {
    cfg.validate()?;
    g.focal_loss(logits, targets, masks, cfg.alpha, cfg.gamma)
}

/// Value of [`focal_loss`] without building a graph.
pub fn focal_loss_value(logits: &Tensor, targets: &[bool], masks: &[bool], cfg: &FocalConfig) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone())?;
    let l = focal_loss(&mut g, z, targets, masks, cfg)?;
    Ok(g.value(l).item())
}

/// `(s_h * s_o)^(1 - lambda) * s_a^lambda` for every action score.
pub fn fuse_scores(s_h: f64, s_o: f64, s_a: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let base = (s_h * s_o).powf(1.0 - lambda);
    Ok(s_a.iter().map(|&a| base * a.powf(lambda)).collect())
}

/// Action probabilities for logits.
pub fn action_scores(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&z| sigmoid(z)).collect()
}

/// Multi-hot targets `[n_pairs * n_actions]`: a pair is positive for action `a`
/// when both its boxes overlap some ground-truth pair of action `a` with IoU
/// above `thresh`.
pub fn pair_targets(pairs: &[(BoxN, BoxN)], gt: &[(BoxN, BoxN, usize)], n_actions: usize, thresh: f64) -> Vec<bool> {
    let mut out = vec![false; pairs.len() * n_actions];
    for (i, (ph, po)) in pairs.iter().enumerate() {
        for (gh, go, a) in gt {
            if *a < n_actions && box_iou(ph, gh) > thresh && box_iou(po, go) > thresh {
                out[i * n_actions + a] = true;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_check, ParamStore, SeededRng};
    use proptest::prelude::*;

    fn table() -> ActionTable {
        ActionTable::from_lists(4, &[vec![0], vec![1, 3], vec![0, 1, 2, 3]]).unwrap()
    }

    #[test]
    fn masks_are_table_rows() {
        let t = table();
        assert_eq!(action_mask(1, &t).unwrap().iter().filter(|&&v| v).count(), 2);
        assert!(action_mask(2, &t).unwrap().iter().all(|&v| v));
        assert!(action_mask(3, &t).is_err());
    }

    #[test]
    fn interaction_ids_follow_object_major_order() {
        let t = table();
        assert_eq!(t.interactions(), vec![(0, 0), (1, 1), (1, 3), (2, 0), (2, 1), (2, 2), (2, 3)]);
        for (i, &(c, a)) in t.interactions().iter().enumerate() {
            assert_eq!(t.interaction_id(c, a), Some(i));
        }
        assert_eq!(t.interaction_id(1, 0), None);
    }

    #[test]
    fn table_text_round_trip_and_errors() {
        let t = table();
        assert_eq!(t.to_text(), "0: 0\n1: 1,3\n2: 0,1,2,3\n");
        assert_eq!(ActionTable::parse(&t.to_text(), 4).unwrap(), t);
        assert!(ActionTable::parse("0: 5\n", 4).is_err());
        assert!(ActionTable::parse("1: 0\n", 4).is_err());
        assert!(ActionTable::parse("0:\n", 4).is_err());
        assert!(ActionTable::parse("zero: 1\n", 4).is_err());
    }

    #[test]
    fn focal_hand_value() {
        let l = focal_loss_value(&Tensor::from_rows(&[vec![0.0]]).unwrap(), &[true], &[true], &FocalConfig::default())
            .unwrap();
        let expected = 0.5 * 0.5f64.powf(0.1) * 2f64.ln();
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 0.3234).abs() < 5e-5);
    }

    #[test]
    fn confident_correct_positive_costs_nothing() {
        let l = focal_loss_value(&Tensor::from_rows(&[vec![40.0]]).unwrap(), &[true], &[true], &FocalConfig::default())
            .unwrap();
        assert!(l < 1e-15);
    }

    #[test]
    fn fusion_hand_value_and_endpoints() {
        let s = fuse_scores(0.8, 0.5, &[0.9], 0.26).unwrap()[0];
        assert!((s - 0.4f64.powf(0.74) * 0.9f64.powf(0.26)).abs() < 1e-15);
        assert!((s - 0.494).abs() < 5e-4);
        assert_eq!(fuse_scores(1.0, 1.0, &[1.0], 0.26).unwrap(), vec![1.0]);
        assert_eq!(fuse_scores(0.8, 0.5, &[0.3, 0.7], 0.0).unwrap(), vec![0.8 * 0.5, 0.8 * 0.5]);
        assert_eq!(fuse_scores(0.8, 0.5, &[0.3, 0.7], 1.0).unwrap(), vec![0.3, 0.7]);
        assert!(fuse_scores(0.8, 0.5, &[0.3], 1.5).is_err());
    }

    #[test]
    fn targets_need_both_boxes() {
        let h = BoxN::new(0.3, 0.3, 0.2, 0.4);
        let o = BoxN::new(0.6, 0.6, 0.2, 0.2);
        let far = BoxN::new(0.9, 0.1, 0.1, 0.1);
        let t = pair_targets(&[(h, o), (h, far)], &[(h, o, 2)], 3, 0.5);
        assert_eq!(t, vec![false, false, true, false, false, false]);
    }

    fn bce(z: f64, y: bool, alpha: f64) -> f64 {
        let p = 1.0 / (1.0 + (-z).exp());
        if y {
            -alpha * p.max(1e-12).ln()
        } else {
            -(1.0 - alpha) * (1.0 - p).max(1e-12).ln()
        }
    }

    fn cells() -> impl Strategy<Value = Vec<(f64, bool, bool)>> {
        prop::collection::vec((-8.0f64..8.0, any::<bool>(), any::<bool>()), 1..24)
    }

    proptest! {
        #[test]
        fn gamma_zero_is_weighted_bce(cells in cells(), alpha in 0.0f64..1.0) {
            let n = cells.len();
            let logits = Tensor::new(vec![1, n], cells.iter().map(|c| c.0).collect()).unwrap();
            let t: Vec<bool> = cells.iter().map(|c| c.1).collect();
            let m: Vec<bool> = cells.iter().map(|c| c.2).collect();
            let l = focal_loss_value(&logits, &t, &m, &FocalConfig { alpha, gamma: 0.0 }).unwrap();
            let pos = cells.iter().filter(|c| c.1 && c.2).count().max(1) as f64;
            let oracle: f64 = cells.iter().filter(|c| c.2).map(|c| bce(c.0, c.1, alpha)).sum::<f64>() / pos;
            prop_assert!((l - oracle).abs() < 1e-12);
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn focal_gradient_matches_and_masked_cells_get_none(cells in cells(), gamma in 0.0f64..2.0) {
            let n = cells.len();
            let mut store = ParamStore::new();
            let id = store.add("z", Tensor::new(vec![1, n], cells.iter().map(|c| c.0).collect()).unwrap()).unwrap();
            let t: Vec<bool> = cells.iter().map(|c| c.1).collect();
            let m: Vec<bool> = cells.iter().map(|c| c.2).collect();
            let cfg = FocalConfig { alpha: 0.5, gamma };
            let f = |g: &mut Graph, s: &ParamStore| {
                let z = g.param(s, id)?;
                focal_loss(g, z, &t, &m, &cfg)
            };
            let rep = finite_diff_check(f, &store, 1e-6).unwrap();
            prop_assert!(rep.max_rel_error < 1e-6, "{:?}", rep);
            let mut g = Graph::new();
            let out = f(&mut g, &store).unwrap();
            let grads = g.backward(out).unwrap();
            for (k, c) in cells.iter().enumerate() {
                if !c.2 {
                    prop_assert_eq!(grads.get(id).unwrap().data()[k], 0.0);
                }
            }
        }

        #[test]
        fn fusion_monotone_and_argmax_preserving(
            sh in 0.0f64..1.0, so in 0.0f64..1.0, lambda in 0.01f64..1.0,
            sa in prop::collection::vec(0.0f64..1.0, 1..10), bump in 0.0f64..0.5,
        ) {
            let s = fuse_scores(sh, so, &sa, lambda).unwrap();
            let up = fuse_scores((sh + bump).min(1.0), so, &sa, lambda).unwrap();
            let up_o = fuse_scores(sh, (so + bump).min(1.0), &sa, lambda).unwrap();
            for i in 0..sa.len() {
                prop_assert!(up[i] >= s[i] && up_o[i] >= s[i]);
            }
            let bumped: Vec<f64> = sa.iter().map(|a| (a + bump).min(1.0)).collect();
            let sb = fuse_scores(sh, so, &bumped, lambda).unwrap();
            for i in 0..sa.len() {
                prop_assert!(sb[i] >= s[i]);
            }
            if sh * so > 0.0 && lambda > 0.0 {
                let arg = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
                prop_assert_eq!(arg(&s), arg(&sa));
            }
        }
    }

    #[test]
    fn loss_is_zero_only_when_saturated() {
        let mut rng = SeededRng::new(3);
        let t: Vec<bool> = (0..6).map(|_| rng.bernoulli(0.5)).collect();
        let sat = Tensor::new(vec![1, 6], t.iter().map(|&y| if y { 60.0 } else { -60.0 }).collect()).unwrap();
        let cfg = FocalConfig::default();
        assert!(focal_loss_value(&sat, &t, &[true; 6], &cfg).unwrap() < 1e-20);
        let mild = sat.map(|z| z / 30.0);
        assert!(focal_loss_value(&mild, &t, &[true; 6], &cfg).unwrap() > 0.0);
    }
}
