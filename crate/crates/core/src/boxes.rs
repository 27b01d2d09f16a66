//! Box conversions, IoU and generalized IoU, both on plain numbers and as
//! differentiable graph expressions.

use hoi_tensor::{Graph, Var};
use ndarray::Array2;

/// `(cx, cy, w, h)` to `(x0, y0, x1, y1)`.
pub fn cxcywh_to_xyxy(b: [f64; 4]) -> [f64; 4] {
    [b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]]
}

pub fn xyxy_to_cxcywh(b: [f64; 4]) -> [f64; 4] {
    [(b[0] + b[2]) * 0.5, (b[1] + b[3]) * 0.5, b[2] - b[0], b[3] - b[1]]
}

pub fn area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn intersection(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

/// IoU of two corner boxes; 0 when the union is empty.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU of two corner boxes, in `[-1, 1]`.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let enclosure = (a[2].max(b[2]) - a[0].min(b[0])).max(0.0) * (a[3].max(b[3]) - a[1].min(b[1])).max(0.0);
    if enclosure > 0.0 {
        iou - (enclosure - union) / enclosure
    } else {
        iou
    }
}

/// Sum of absolute coordinate differences.
pub fn box_l1(a: [f64; 4], b: [f64; 4]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn row(a: &Array2<f64>, i: usize) -> [f64; 4] {
    [a[[i, 0]], a[[i, 1]], a[[i, 2]], a[[i, 3]]]
}

/// Row-wise GIoU between predicted `k × 4` cxcywh boxes (graph node) and
/// constant targets, as a `k × 1` node. Predicted boxes must have positive
/// width and height.
pub fn giou_var(g: &mut Graph, pred: Var, target: &Array2<f64>) -> Var {
    let k = target.nrows();
    let col = |g: &mut Graph, f: &dyn Fn(usize) -> f64| g.constant(Array2::from_shape_fn((k, 1), |(i, _)| f(i)));
    let tc: Vec<[f64; 4]> = (0..k).map(|i| cxcywh_to_xyxy(row(target, i))).collect();
    let t0 = col(g, &|i| tc[i][0]);
    let t1 = col(g, &|i| tc[i][1]);
    let t2 = col(g, &|i| tc[i][2]);
    let t3 = col(g, &|i| tc[i][3]);
    let t_area = col(g, &|i| area(tc[i]));

    let cx = g.slice_cols(pred, 0, 1);
    let cy = g.slice_cols(pred, 1, 2);
    let w = g.slice_cols(pred, 2, 3);
    let h = g.slice_cols(pred, 3, 4);
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let p0 = g.sub(cx, hw);
    let p1 = g.sub(cy, hh);
    let p2 = g.add(cx, hw);
    let p3 = g.add(cy, hh);

    let ix0 = g.maximum(p0, t0);
    let iy0 = g.maximum(p1, t1);
    let ix1 = g.minimum(p2, t2);
    let iy1 = g.minimum(p3, t3);
    let iw = g.sub(ix1, ix0);
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);

    let p_area = g.mul(w, h);
    let union = g.add(p_area, t_area);
    let union = g.sub(union, inter);
    let iou = g.div(inter, union);

    let ex0 = g.minimum(p0, t0);
    let ey0 = g.minimum(p1, t1);
    let ex1 = g.maximum(p2, t2);
    let ey1 = g.maximum(p3, t3);
    let ew = g.sub(ex1, ex0);
    let eh = g.sub(ey1, ey0);
    let enclosure = g.mul(ew, eh);
    let excess = g.sub(enclosure, union);
    let penalty = g.div(excess, enclosure);
    g.sub(iou, penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_giou() {
        let g = giou([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]);
        assert!((g - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-15);
        assert!((1.0 - g - 1.0794).abs() < 1e-4);
        assert_eq!(giou([0.1, 0.2, 0.5, 0.9], [0.1, 0.2, 0.5, 0.9]), 1.0);
    }

    #[test]
    fn giou_decreases_with_separation() {
        let a = [0.0, 0.0, 1.0, 1.0];
        let mut prev = f64::INFINITY;
        for step in 0..200 {
            let d = 1.0 + step as f64 * 0.5;
            let v = giou(a, [d, 0.0, d + 1.0, 1.0]);
            assert!(v < prev || step == 0);
            prev = v;
        }
        assert!(prev < -0.98);
    }

    #[test]
    fn degenerate_boxes() {
        let p = [0.5, 0.5, 0.5, 0.5];
        assert_eq!(iou(p, [0.0, 0.0, 1.0, 1.0]), 0.0);
        let g = giou(p, [0.0, 0.0, 1.0, 1.0]);
        assert!(g.is_finite() && g <= 0.0);
        assert_eq!(giou(p, p), 0.0);
    }

    #[test]
    fn l1_examples() {
        assert_eq!(box_l1([0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]), 0.0);
        let d = box_l1([0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.4, 0.2]);
        assert!((d - 0.2).abs() < 1e-15);
    }

    #[test]
    fn graph_giou_matches_scalar() {
        let pred = Array2::from_shape_vec((2, 4), vec![0.5, 0.5, 0.2, 0.3, 0.3, 0.6, 0.1, 0.4]).unwrap();
        let tgt = Array2::from_shape_vec((2, 4), vec![0.45, 0.55, 0.25, 0.2, 0.8, 0.1, 0.2, 0.1]).unwrap();
        let mut g = Graph::new();
        let p = g.constant(pred.clone());
        let v = giou_var(&mut g, p, &tgt);
        for i in 0..2 {
            let expect = giou(cxcywh_to_xyxy(row(&pred, i)), cxcywh_to_xyxy(row(&tgt, i)));
            assert!((g.value(v)[[i, 0]] - expect).abs() < 1e-14);
        }
    }

    fn corner_box() -> impl Strategy<Value = [f64; 4]> {
        (0.0..1.0f64, 0.0..1.0f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
    }

    proptest! {
        #[test]
        fn giou_bounds_and_symmetry(a in corner_box(), b in corner_box()) {
            let v = giou(a, b);
            prop_assert!((-1.0..=1.0).contains(&v));
            prop_assert!((v - giou(b, a)).abs() < 1e-12);
            prop_assert!(v <= iou(a, b) + 1e-12);
            let i = iou(a, b);
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert_eq!(box_l1(a, b), box_l1(b, a));
        }

        #[test]
        fn corner_round_trip(b in corner_box()) {
            let back = cxcywh_to_xyxy(xyxy_to_cxcywh(b));
            for k in 0..4 {
                prop_assert!((back[k] - b[k]).abs() < 1e-12);
            }
        }
    }
}
