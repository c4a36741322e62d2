//! Training objectives: bipartite-matching cost, the detection loss
//! (GIoU + L1 + confidence CE), the per-adapter auxiliary loss, and the
//! focal/dice mask losses.
//!
//! Box losses are built from tape primitives so gradients reach the box
//! head; the matching cost itself is plain host arithmetic (no gradient
//! flows through the assignment).

use crate::boxes::{box_l1, giou, BoxCxcywh, AREA_FLOOR};
use crate::hungarian::{assign, Assignment};
use crate::params::Graph;
use crate::scalar::Scalar;
use crate::tensor::TensorId;

/// Probability clamp inside CE and focal terms.
pub const PROB_EPS: f64 = 1e-7;
/// Down-weight for the no-object class of unmatched queries.
pub const NO_OBJECT_WEIGHT: f64 = 0.1;
/// Focal loss parameters.
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: i32 = 2;
/// Dice smoothing.
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub iou: f64,
    pub l1: f64,
    pub ce: f64,
    pub aux: f64,
    pub focal: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { iou: 3.0, l1: 1.0, ce: 1.0, aux: 0.1, focal: 5.0, dice: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("iou", self.iou),
            ("l1", self.l1),
            ("ce", self.ce),
            ("aux", self.aux),
            ("focal", self.focal),
            ("dice", self.dice),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("loss weight {name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Host-side view of one query's prediction, used for matching and eval.
#[derive(Clone, Debug)]
pub struct QueryPrediction {
    pub boxes: Vec<[f64; 4]>,
    pub logits: Vec<[f64; 2]>,
}

impl QueryPrediction {
    pub fn from_tape<S: Scalar>(g: &Graph<S>, boxes: TensorId, logits: TensorId) -> Self {
        let nb = g.tape.shape(boxes)[0];
        let bv = g.tape.value(boxes);
        let lv = g.tape.value(logits);
        QueryPrediction {
            boxes: (0..nb)
                .map(|i| {
                    [
                        bv[i * 4].to_f64(),
                        bv[i * 4 + 1].to_f64(),
                        bv[i * 4 + 2].to_f64(),
                        bv[i * 4 + 3].to_f64(),
                    ]
                })
                .collect(),
            logits: (0..nb).map(|i| [lv[i * 2].to_f64(), lv[i * 2 + 1].to_f64()]).collect(),
        }
    }

    /// Softmax probability of the object class, per query.
    pub fn object_probs(&self) -> Vec<f64> {
        self.logits
            .iter()
            .map(|&[no_obj, obj]| {
                let m = no_obj.max(obj);
                let e0 = (no_obj - m).exp();
                let e1 = (obj - m).exp();
                e1 / (e0 + e1)
            })
            .collect()
    }
}

/// DETR-style matching cost: L1 + (1 - GIoU) box terms minus the object
/// probability, sharing the detection-loss weights.
pub fn match_cost(pred: &QueryPrediction, targets: &[BoxCxcywh], w: &LossWeights) -> Vec<Vec<f64>> {
    let probs = pred.object_probs();
    pred.boxes
        .iter()
        .enumerate()
        .map(|(q, &b)| {
            let bq = BoxCxcywh::from_array(b);
            targets
                .iter()
                .map(|&t| {
                    w.l1 * box_l1(bq, t) + w.iou * (1.0 - giou(bq.to_xyxy(), t.to_xyxy()))
                        - w.ce * probs[q]
                })
                .collect()
        })
        .collect()
}

pub fn match_predictions(
    pred: &QueryPrediction,
    targets: &[BoxCxcywh],
    w: &LossWeights,
) -> Assignment {
    assign(&match_cost(pred, targets, w))
}

/// Per-pair GIoU built from tape primitives; `a` and `b` are [M,4]
/// center-form boxes, the result is an [M,1] column.
pub fn giou_pairs<S: Scalar>(g: &mut Graph<S>, a: TensorId, b: TensorId) -> TensorId {
    let m = g.tape.shape(a)[0];
    assert_eq!(g.tape.shape(a), g.tape.shape(b), "giou_pairs: box count mismatch");
    let corner = |g: &mut Graph<S>, t: TensorId| {
        let cx = g.tape.slice(t, 1, 0, 1);
        let cy = g.tape.slice(t, 1, 1, 1);
        let w = g.tape.slice(t, 1, 2, 1);
        let h = g.tape.slice(t, 1, 3, 1);
        let hw = g.tape.scale(w, 0.5);
        let hh = g.tape.scale(h, 0.5);
        let x1 = g.tape.sub(cx, hw);
        let y1 = g.tape.sub(cy, hh);
        let x2 = g.tape.add(cx, hw);
        let y2 = g.tape.add(cy, hh);
        (x1, y1, x2, y2, w, h)
    };
    let (ax1, ay1, ax2, ay2, aw, ah) = corner(g, a);
    let (bx1, by1, bx2, by2, bw, bh) = corner(g, b);

    let ix_hi = g.tape.minimum(ax2, bx2);
    let ix_lo = g.tape.maximum(ax1, bx1);
    let ix = g.tape.sub(ix_hi, ix_lo);
    let ix = g.tape.relu(ix);
    let iy_hi = g.tape.minimum(ay2, by2);
    let iy_lo = g.tape.maximum(ay1, by1);
    let iy = g.tape.sub(iy_hi, iy_lo);
    let iy = g.tape.relu(iy);
    let inter = g.tape.mul(ix, iy);

    let area_a = g.tape.mul(aw, ah);
    let area_b = g.tape.mul(bw, bh);
    let areas = g.tape.add(area_a, area_b);
    let union = g.tape.sub(areas, inter);
    let floor = g.tape.leaf(vec![S::from_f64(AREA_FLOOR); m], &[m, 1], false);
    let union = g.tape.maximum(union, floor);

    let ex_hi = g.tape.maximum(ax2, bx2);
    let ex_lo = g.tape.minimum(ax1, bx1);
    let ex = g.tape.sub(ex_hi, ex_lo);
    let ey_hi = g.tape.maximum(ay2, by2);
    let ey_lo = g.tape.minimum(ay1, by1);
    let ey = g.tape.sub(ey_hi, ey_lo);
    let enc = g.tape.mul(ex, ey);
    let enc = g.tape.maximum(enc, floor);

    let iou_term = g.tape.div(inter, union);
    let dead = g.tape.sub(enc, union);
    let penalty = g.tape.div(dead, enc);
    g.tape.sub(iou_term, penalty)
}

#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub total: TensorId,
    pub box_l1: TensorId,
    pub box_iou: TensorId,
    pub ce: TensorId,
}

/// Eq-style detection objective: matched queries take GIoU + L1 box terms
/// and object-class CE; unmatched queries take down-weighted no-object CE.
/// CE is averaged over queries, box terms over matches.
pub fn detection_loss<S: Scalar>(
    g: &mut Graph<S>,
    boxes: TensorId,
    logits: TensorId,
    targets: &[BoxCxcywh],
    assignment: &Assignment,
    w: &LossWeights,
) -> DetectionLoss {
    let n_q = g.tape.shape(boxes)[0];
    assert_eq!(g.tape.shape(logits), &[n_q, 2], "detection_loss: logits must be [n_q,2]");
    for &(q, t) in &assignment.pairs {
        assert!(q < n_q && t < targets.len(), "detection_loss: assignment out of range");
    }

    // box terms over matched pairs
    let (l1_loss, iou_loss) = if assignment.pairs.is_empty() {
        (g.tape.zeros(&[1]), g.tape.zeros(&[1]))
    } else {
        let rows: Vec<usize> = assignment.pairs.iter().map(|&(q, _)| q).collect();
        let matched = g.tape.gather_rows(boxes, &rows);
        let tgt_data: Vec<S> = assignment
            .pairs
            .iter()
            .flat_map(|&(_, t)| targets[t].as_array().into_iter().map(S::from_f64))
            .collect();
        let tgt = g.tape.leaf(tgt_data, &[rows.len(), 4], false);

        let diff = g.tape.sub(matched, tgt);
        let adiff = g.tape.abs(diff);
        let per_match = g.tape.sum_axis(adiff, 1);
        let l1_loss = g.tape.mean_all(per_match);

        let gv = giou_pairs(g, matched, tgt);
        let ones = g.tape.leaf(vec![S::ONE; rows.len()], &[rows.len(), 1], false);
        let one_minus = g.tape.sub(ones, gv);
        let iou_loss = g.tape.mean_all(one_minus);
        (l1_loss, iou_loss)
    };

    // confidence CE over every query; class 1 = object for matched queries
    let mut onehot = vec![S::ZERO; n_q * 2];
    let mut weights = vec![S::from_f64(NO_OBJECT_WEIGHT); n_q];
    for q in 0..n_q {
        onehot[q * 2] = S::ONE;
    }
    for &(q, _) in &assignment.pairs {
        onehot[q * 2] = S::ZERO;
        onehot[q * 2 + 1] = S::ONE;
        weights[q] = S::ONE;
    }
    let probs = g.tape.softmax(logits, 1);
    let probs = g.tape.clamp(probs, PROB_EPS, 1.0);
    let logp = g.tape.ln(probs);
    let mask = g.tape.leaf(onehot, &[n_q, 2], false);
    let picked = g.tape.mul(logp, mask);
    let per_query = g.tape.sum_axis(picked, 1);
    let wvec = g.tape.leaf(weights, &[n_q], false);
    let weighted = g.tape.mul(per_query, wvec);
    let sum = g.tape.sum_all(weighted);
    let ce = g.tape.scale(sum, -1.0 / n_q as f64);

    let iou_term = g.tape.scale(iou_loss, w.iou);
    let l1_term = g.tape.scale(l1_loss, w.l1);
    let ce_term = g.tape.scale(ce, w.ce);
    let partial = g.tape.add(iou_term, l1_term);
    let total = g.tape.add(partial, ce_term);
    DetectionLoss { total, box_l1: l1_loss, box_iou: iou_loss, ce }
}

/// Auxiliary objective: the detection loss applied to lightweight box and
/// confidence heads over each adapter layer's refined queries, each layer
/// matched independently, summed and scaled by the aux weight.
pub fn aux_loss<S: Scalar>(
    g: &mut Graph<S>,
    per_layer: &[(TensorId, TensorId)],
    targets: &[BoxCxcywh],
    w: &LossWeights,
) -> Option<TensorId> {
    if per_layer.is_empty() || w.aux == 0.0 {
        return None;
    }
    let mut acc: Option<TensorId> = None;
    for &(boxes, logits) in per_layer {
        let pred = QueryPrediction::from_tape(g, boxes, logits);
        let assignment = match_predictions(&pred, targets, w);
        let det = detection_loss(g, boxes, logits, targets, &assignment, w);
        acc = Some(match acc {
            Some(a) => g.tape.add(a, det.total),
            None => det.total,
        });
    }
    acc.map(|a| g.tape.scale(a, w.aux))
}

/// Focal loss over a mask prediction in [0,1] against a binary target,
/// mean-reduced over pixels. alpha=0.25, gamma=2.
pub fn focal_loss<S: Scalar>(g: &mut Graph<S>, pred: TensorId, target: &[S]) -> TensorId {
    let n = g.tape.value(pred).len();
    assert_eq!(n, target.len(), "focal_loss: prediction/target length mismatch");
    let shape = g.tape.shape(pred).to_vec();
    let p = g.tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
    let t = g.tape.leaf(target.to_vec(), &shape, false);
    let ones = g.tape.leaf(vec![S::ONE; n], &shape, false);
    let one_minus_p = g.tape.sub(ones, p);
    let one_minus_t = g.tape.sub(ones, t);

    let log_p = g.tape.ln(p);
    let log_q = g.tape.ln(one_minus_p);
    debug_assert_eq!(FOCAL_GAMMA, 2);
    let focus_pos = g.tape.mul(one_minus_p, one_minus_p);
    let focus_neg = g.tape.mul(p, p);

    let pos = g.tape.mul(t, focus_pos);
    let pos = g.tape.mul(pos, log_p);
    let pos = g.tape.scale(pos, -FOCAL_ALPHA);
    let neg = g.tape.mul(one_minus_t, focus_neg);
    let neg = g.tape.mul(neg, log_q);
    let neg = g.tape.scale(neg, -(1.0 - FOCAL_ALPHA));
    let term = g.tape.add(pos, neg);
    g.tape.mean_all(term)
}

/// Dice loss with smoothing: 1 - (2·overlap + eps)/(mass_pred + mass_gt + eps).
pub fn dice_loss<S: Scalar>(g: &mut Graph<S>, pred: TensorId, target: &[S]) -> TensorId {
    let n = g.tape.value(pred).len();
    assert_eq!(n, target.len(), "dice_loss: prediction/target length mismatch");
    let shape = g.tape.shape(pred).to_vec();
    let t = g.tape.leaf(target.to_vec(), &shape, false);
    let prod = g.tape.mul(pred, t);
    let overlap = g.tape.sum_all(prod);
    let num = g.tape.scale(overlap, 2.0);
    let eps = g.tape.scalar(DICE_EPS);
    let num = g.tape.add(num, eps);
    let mass_p = g.tape.sum_all(pred);
    let mass_t = g.tape.leaf(vec![target.iter().copied().sum()], &[1], false);
    let den = g.tape.add(mass_p, mass_t);
    let den = g.tape.add(den, eps);
    let frac = g.tape.div(num, den);
    let one = g.tape.scalar(1.0);
    g.tape.sub(one, frac)
}

/// Combined mask objective.
pub fn segmentation_loss<S: Scalar>(
    g: &mut Graph<S>,
    pred: TensorId,
    target: &[S],
    w: &LossWeights,
) -> (TensorId, TensorId, TensorId) {
    let f = focal_loss(g, pred, target);
    let d = dice_loss(g, pred, target);
    let ft = g.tape.scale(f, w.focal);
    let dt = g.tape.scale(d, w.dice);
    (g.tape.add(ft, dt), f, d)
}

/// Symmetric InfoNCE over an in-batch similarity matrix whose diagonal
/// holds the true pairs. The reverse direction is the column-wise softmax
/// of the same matrix.
pub fn contrastive_loss<S: Scalar>(g: &mut Graph<S>, sims: TensorId) -> TensorId {
    let n = g.tape.shape(sims)[0];
    assert_eq!(g.tape.shape(sims), &[n, n], "contrastive_loss: similarity matrix must be square");
    let mut eye = vec![S::ZERO; n * n];
    for i in 0..n {
        eye[i * n + i] = S::ONE;
    }
    let mask = g.tape.leaf(eye, &[n, n], false);

    let direction = |g: &mut Graph<S>, axis: usize| {
        let p = g.tape.softmax(sims, axis);
        let p = g.tape.clamp(p, PROB_EPS, 1.0);
        let lp = g.tape.ln(p);
        let diag = g.tape.mul(lp, mask);
        let s = g.tape.sum_all(diag);
        g.tape.scale(s, -1.0 / n as f64)
    };
    let img_to_txt = direction(g, 1);
    let txt_to_img = direction(g, 0);
    let sum = g.tape.add(img_to_txt, txt_to_img);
    g.tape.scale(sum, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::CounterRng;
    use crate::tensor::grad_check;

    fn graph_store() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn perfect_prediction_cost_is_minus_lambda_ce() {
        let target = BoxCxcywh::new(0.4, 0.6, 0.2, 0.3);
        let pred = QueryPrediction {
            boxes: vec![target.as_array()],
            logits: vec![[-500.0, 500.0]], // softmax saturates to exactly 1
        };
        let w = LossWeights::default();
        let cost = match_cost(&pred, &[target], &w);
        assert_eq!(cost[0][0], -w.ce);
    }

    #[test]
    fn single_target_matching_is_argmin() {
        let t = BoxCxcywh::new(0.5, 0.5, 0.2, 0.2);
        let pred = QueryPrediction {
            boxes: vec![
                [0.9, 0.9, 0.1, 0.1],
                [0.5, 0.5, 0.2, 0.2],
                [0.1, 0.2, 0.3, 0.1],
            ],
            logits: vec![[0.0, 0.0]; 3],
        };
        let a = match_predictions(&pred, &[t], &LossWeights::default());
        assert_eq!(a.pairs, vec![(1, 0)]);
    }

    #[test]
    fn cost_matrix_is_finite_for_valid_boxes() {
        let mut rng = CounterRng::new(3);
        for _ in 0..200 {
            let rand_box = |r: &mut CounterRng| {
                BoxCxcywh::new(
                    r.uniform(0.0, 1.0),
                    r.uniform(0.0, 1.0),
                    r.uniform(0.001, 1.0),
                    r.uniform(0.001, 1.0),
                )
            };
            let pred = QueryPrediction {
                boxes: vec![rand_box(&mut rng).as_array(); 3],
                logits: vec![[rng.uniform(-30.0, 30.0), rng.uniform(-30.0, 30.0)]; 3],
            };
            let tgt = [rand_box(&mut rng)];
            for row in match_cost(&pred, &tgt, &LossWeights::default()) {
                for v in row {
                    assert!(v.is_finite());
                }
            }
        }
    }

    #[test]
    fn giou_pairs_matches_scalar_route() {
        let mut rng = CounterRng::new(9);
        let store = graph_store();
        for _ in 0..200 {
            let a = BoxCxcywh::new(
                rng.uniform(0.1, 0.9),
                rng.uniform(0.1, 0.9),
                rng.uniform(0.05, 0.5),
                rng.uniform(0.05, 0.5),
            );
            let b = BoxCxcywh::new(
                rng.uniform(0.1, 0.9),
                rng.uniform(0.1, 0.9),
                rng.uniform(0.05, 0.5),
                rng.uniform(0.05, 0.5),
            );
            let mut g = Graph::new(&store);
            let at = g.tape.leaf(a.as_array().to_vec(), &[1, 4], false);
            let bt = g.tape.leaf(b.as_array().to_vec(), &[1, 4], false);
            let gt = giou_pairs(&mut g, at, bt);
            let tape_val = g.tape.value(gt)[0];
            let scalar_val = giou(a.to_xyxy(), b.to_xyxy());
            assert!(
                (tape_val - scalar_val).abs() < 1e-12,
                "tape {tape_val} vs scalar {scalar_val}"
            );
        }
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        // away from degenerate zero-area configurations
        let target = BoxCxcywh::new(0.6, 0.55, 0.3, 0.25);
        let err = grad_check(
            |t, x| {
                let store = ParamStore::<f64>::new();
                let mut g = Graph::new(&store);
                std::mem::swap(&mut g.tape, t);
                let tgt = g.tape.leaf(target.as_array().to_vec(), &[1, 4], false);
                let gv = giou_pairs(&mut g, x, tgt);
                let one = g.tape.scalar(1.0);
                let col = g.tape.sum_all(gv);
                let loss = g.tape.sub(one, col);
                let out = g.tape.sum_all(loss);
                std::mem::swap(&mut g.tape, t);
                out
            },
            &[0.45, 0.5, 0.2, 0.3],
            &[1, 4],
            1e-4,
            1e-8,
        );
        assert!(err < 1e-4, "giou grad err {err}");
    }

    #[test]
    fn detection_loss_zero_weights_gives_zero() {
        let store = graph_store();
        let mut g = Graph::new(&store);
        let boxes = g.tape.leaf(vec![0.5, 0.5, 0.5, 0.5], &[1, 4], true);
        let logits = g.tape.leaf(vec![0.0, 0.0], &[1, 2], true);
        let t = [BoxCxcywh::new(0.5, 0.5, 0.5, 0.5)];
        let w = LossWeights { iou: 0.0, l1: 0.0, ce: 0.0, aux: 0.0, focal: 0.0, dice: 0.0 };
        let a = match_predictions(&QueryPrediction::from_tape(&g, boxes, logits), &t, &w);
        let det = detection_loss(&mut g, boxes, logits, &t, &a, &w);
        assert_eq!(g.tape.value(det.total)[0], 0.0);
    }

    #[test]
    fn detection_loss_confident_perfect_prediction_is_tiny() {
        let store = graph_store();
        let mut g = Graph::new(&store);
        let t = BoxCxcywh::new(0.4, 0.3, 0.2, 0.4);
        let mut bdata = vec![0.0; 12];
        bdata[0..4].copy_from_slice(&t.as_array());
        bdata[4..8].copy_from_slice(&[0.8, 0.8, 0.1, 0.1]);
        bdata[8..12].copy_from_slice(&[0.2, 0.9, 0.1, 0.1]);
        let boxes = g.tape.leaf(bdata, &[3, 4], false);
        // margin 10 for every query: matched is confident object,
        // the rest confident no-object
        let logits = g.tape.leaf(vec![-5.0, 5.0, 5.0, -5.0, 5.0, -5.0], &[3, 2], false);
        let w = LossWeights::default();
        let a = match_predictions(&QueryPrediction::from_tape(&g, boxes, logits), &[t], &w);
        assert_eq!(a.pairs, vec![(0, 0)]);
        let det = detection_loss(&mut g, boxes, logits, &[t], &a, &w);
        let total = g.tape.value(det.total)[0];
        assert!(total < 0.01, "expected near-zero loss, got {total}");
        // breakdown adds up
        let sum = w.iou * g.tape.value(det.box_iou)[0]
            + w.l1 * g.tape.value(det.box_l1)[0]
            + w.ce * g.tape.value(det.ce)[0];
        assert!((sum - total).abs() < 1e-12);
    }

    #[test]
    fn detection_loss_is_nonnegative() {
        let mut rng = CounterRng::new(31);
        let store = graph_store();
        for _ in 0..100 {
            let mut g = Graph::new(&store);
            let bdata: Vec<f64> = (0..12)
                .map(|i| if i % 4 >= 2 { rng.uniform(0.05, 0.9) } else { rng.uniform(0.0, 1.0) })
                .collect();
            let ldata: Vec<f64> = (0..6).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let boxes = g.tape.leaf(bdata, &[3, 4], false);
            let logits = g.tape.leaf(ldata, &[3, 2], false);
            let t = [BoxCxcywh::new(
                rng.uniform(0.2, 0.8),
                rng.uniform(0.2, 0.8),
                rng.uniform(0.1, 0.4),
                rng.uniform(0.1, 0.4),
            )];
            let w = LossWeights::default();
            let a = match_predictions(&QueryPrediction::from_tape(&g, boxes, logits), &t, &w);
            let det = detection_loss(&mut g, boxes, logits, &t, &a, &w);
            assert!(g.tape.value(det.total)[0] >= 0.0);
        }
    }

    #[test]
    fn detection_loss_box_gradient_matches_finite_differences() {
        let t = BoxCxcywh::new(0.45, 0.55, 0.25, 0.3);
        let w = LossWeights::default();
        let err = grad_check(
            |tape, x| {
                let store = ParamStore::<f64>::new();
                let mut g = Graph::new(&store);
                std::mem::swap(&mut g.tape, tape);
                let logits = g.tape.leaf(vec![-1.0, 2.0, 1.0, -2.0], &[2, 2], false);
                // fixed assignment keeps the function differentiable
                let a = Assignment { pairs: vec![(0, 0)], total_cost: 0.0 };
                let det = detection_loss(&mut g, x, logits, &[t], &a, &w);
                std::mem::swap(&mut g.tape, tape);
                det.total
            },
            &[0.35, 0.5, 0.3, 0.35, 0.7, 0.7, 0.1, 0.1],
            &[2, 4],
            1e-5,
            1e-6,
        );
        assert!(err < 1e-3, "detection loss grad err {err}");
    }

    #[test]
    fn dice_perfect_mask_is_zero() {
        let store = graph_store();
        let mut g = Graph::new(&store);
        let gt: Vec<f64> = (0..64 * 64).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let p = g.tape.leaf(gt.clone(), &[1, 64 * 64], false);
        let d = dice_loss(&mut g, p, &gt);
        assert!(g.tape.value(d)[0].abs() < 1e-3);
    }

    #[test]
    fn dice_empty_vs_empty_is_zero() {
        let store = graph_store();
        let mut g = Graph::new(&store);
        let gt = vec![0.0; 16];
        let p = g.tape.leaf(gt.clone(), &[1, 16], false);
        let d = dice_loss(&mut g, p, &gt);
        assert_eq!(g.tape.value(d)[0], 0.0);
    }

    #[test]
    fn focal_exact_prediction_is_tiny() {
        let store = graph_store();
        let mut g = Graph::new(&store);
        let gt: Vec<f64> = (0..100).map(|i| if i < 30 { 1.0 } else { 0.0 }).collect();
        let p = g.tape.leaf(gt.clone(), &[1, 100], false);
        let f = focal_loss(&mut g, p, &gt);
        assert!(g.tape.value(f)[0] < 1e-6);
    }

    #[test]
    fn focal_and_dice_permutation_invariant() {
        let mut rng = CounterRng::new(8);
        let store = graph_store();
        let n = 50;
        let pred: Vec<f64> = (0..n).map(|_| rng.uniform(0.05, 0.95)).collect();
        let gt: Vec<f64> = (0..n).map(|_| if rng.next_f64() < 0.4 { 1.0 } else { 0.0 }).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let pred_p: Vec<f64> = perm.iter().map(|&i| pred[i]).collect();
        let gt_p: Vec<f64> = perm.iter().map(|&i| gt[i]).collect();

        let eval = |pred: &[f64], gt: &[f64]| {
            let mut g = Graph::new(&store);
            let p = g.tape.leaf(pred.to_vec(), &[1, n], false);
            let f = focal_loss(&mut g, p, gt);
            let d = dice_loss(&mut g, p, gt);
            (g.tape.value(f)[0], g.tape.value(d)[0])
        };
        let (f1, d1) = eval(&pred, &gt);
        let (f2, d2) = eval(&pred_p, &gt_p);
        assert!((f1 - f2).abs() < 1e-12);
        assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn mask_loss_gradients_match_finite_differences() {
        let mut rng = CounterRng::new(13);
        let gt: Vec<f64> = (0..20).map(|_| if rng.next_f64() < 0.5 { 1.0 } else { 0.0 }).collect();
        let x: Vec<f64> = (0..20).map(|_| rng.uniform(0.1, 0.9)).collect();
        for mode in 0..2 {
            let gt2 = gt.clone();
            let err = grad_check(
                move |tape, xi| {
                    let store = ParamStore::<f64>::new();
                    let mut g = Graph::new(&store);
                    std::mem::swap(&mut g.tape, tape);
                    let out = if mode == 0 {
                        focal_loss(&mut g, xi, &gt2)
                    } else {
                        dice_loss(&mut g, xi, &gt2)
                    };
                    std::mem::swap(&mut g.tape, tape);
                    out
                },
                &x,
                &[1, 20],
                1e-6,
                1e-8,
            );
            assert!(err < 1e-4, "mask loss mode {mode} grad err {err}");
        }
    }

    #[test]
    fn contrastive_single_pair_is_zero() {
        let store = graph_store();
        let mut g = Graph::new(&store);
        let sims = g.tape.leaf(vec![2.7], &[1, 1], false);
        let l = contrastive_loss(&mut g, sims);
        assert_eq!(g.tape.value(l)[0], 0.0);
    }

    #[test]
    fn contrastive_uniform_logits_give_ln_n() {
        let store = graph_store();
        let mut g = Graph::new(&store);
        let n = 8;
        let sims = g.tape.leaf(vec![0.0; n * n], &[n, n], false);
        let l = contrastive_loss(&mut g, sims);
        assert!((g.tape.value(l)[0] - (n as f64).ln()).abs() < 1e-9);
    }
}
