//! Axis-aligned box algebra and overlap metrics, plus per-run aggregation.
//!
//! Boxes use the continuous corner convention (x1, y1, x2, y2) with area
//! `(x2 - x1) * (y2 - y1)` — not the pixel-count convention. All metric
//! arithmetic is f64; rounding to presentation precision happens only in
//! report rendering.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BoxError {
    #[error("box coordinates must be finite")]
    NonFinite,
    #[error("box must satisfy x1 < x2 and y1 < y2 (got [{x1}, {y1}, {x2}, {y2}])")]
    Degenerate { x1: f64, y1: f64, x2: f64, y2: f64 },
}

/// Axis-aligned box in continuous pixel coordinates, corners ordered so that
/// `x1 < x2` and `y1 < y2`. Construction rejects degenerate and non-finite
/// inputs, so every held value is a valid box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBBox")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

#[derive(Deserialize)]
struct RawBBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl TryFrom<RawBBox> for BBox {
    type Error = BoxError;
    fn try_from(raw: RawBBox) -> Result<Self, BoxError> {
        BBox::new(raw.x1, raw.y1, raw.x2, raw.y2)
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BoxError> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(BoxError::NonFinite);
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(BoxError::Degenerate { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self, BoxError> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn scaled(&self, s: f64) -> Result<Self, BoxError> {
        Self::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }
}

/// Overlap area of two boxes; zero when disjoint.
pub fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

pub fn union_area(a: &BBox, b: &BBox) -> f64 {
    a.area() + b.area() - intersection_area(a, b)
}

/// Smallest box containing both inputs.
pub fn enclosing_box(a: &BBox, b: &BBox) -> BBox {
    // component-wise min/max of two valid boxes is always valid
    BBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

/// Intersection over union, in [0, 1]. The union of two valid boxes is
/// strictly positive, so no division guard is needed.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    intersection_area(a, b) / union_area(a, b)
}

/// Generalized IoU: `iou - (|C| - |A ∪ B|) / |C|` where C is the enclosing
/// box. Equals plain IoU when the enclosing box is exactly tiled by the
/// union; approaches −1 for far-apart boxes. Range (−1, 1].
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let c = enclosing_box(a, b).area();
    iou(a, b) - (c - union_area(a, b)) / c
}

/// Both overlap metrics for one (prediction, ground truth) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub iou: f64,
    pub giou: f64,
}

pub fn metric_pair(a: &BBox, b: &BBox) -> MetricPair {
    MetricPair {
        iou: iou(a, b),
        giou: giou(a, b),
    }
}

/// How unscoreable trials (unparseable responses, failed queries) enter the
/// per-configuration means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FailurePolicy {
    /// Failures are excluded from the means and reported as `n_failed`.
    #[default]
    Lenient,
    /// Failures are scored as iou = 0, giou = −1.
    Strict,
}

impl std::fmt::Display for FailurePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FailurePolicy::Lenient => write!(f, "lenient"),
            FailurePolicy::Strict => write!(f, "strict"),
        }
    }
}

impl std::str::FromStr for FailurePolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lenient" => Ok(FailurePolicy::Lenient),
            "strict" => Ok(FailurePolicy::Strict),
            other => Err(format!("unknown failure policy '{other}' (expected lenient|strict)")),
        }
    }
}

/// Mean metrics over one configuration's trials. Means are `None` when no
/// trial contributed, never silently zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub mean_iou: Option<f64>,
    pub mean_giou: Option<f64>,
    pub n_scored: usize,
    pub n_failed: usize,
}

/// Arithmetic means over per-trial outcomes (`None` = failed trial).
/// Summation follows the slice order, so callers that need bit-stable means
/// must present trials in a deterministic order.
pub fn aggregate(trials: &[Option<MetricPair>], policy: FailurePolicy) -> AggregateSummary {
    let n_scored = trials.iter().filter(|t| t.is_some()).count();
    let n_failed = trials.len() - n_scored;

    let (mut sum_iou, mut sum_giou, mut n) = (0.0f64, 0.0f64, 0usize);
    for trial in trials {
        match (trial, policy) {
            (Some(pair), _) => {
                sum_iou += pair.iou;
                sum_giou += pair.giou;
                n += 1;
            }
            (None, FailurePolicy::Strict) => {
                sum_giou += -1.0;
                n += 1;
            }
            (None, FailurePolicy::Lenient) => {}
        }
    }

    let (mean_iou, mean_giou) = if n == 0 {
        (None, None)
    } else {
        (Some(sum_iou / n as f64), Some(sum_giou / n as f64))
    };
    AggregateSummary {
        mean_iou,
        mean_giou,
        n_scored,
        n_failed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Counts unit cells whose centers fall inside a box, treating membership
    /// as [x1, x2) half-open. For integer-coordinate boxes this equals the
    /// continuous area exactly, which makes it an independent check of the
    /// closed-form metrics.
    mod oracle {
        use super::BBox;

        fn inside(b: &BBox, cx: f64, cy: f64) -> bool {
            b.x1() <= cx && cx < b.x2() && b.y1() <= cy && cy < b.y2()
        }

        pub fn counts(a: &BBox, b: &BBox, canvas: u32) -> (u64, u64, u64, u64) {
            let c = super::enclosing_box(a, b);
            let (mut na, mut nb, mut ni, mut nc) = (0u64, 0u64, 0u64, 0u64);
            for y in 0..canvas {
                for x in 0..canvas {
                    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let ia = inside(a, cx, cy);
                    let ib = inside(b, cx, cy);
                    if ia {
                        na += 1;
                    }
                    if ib {
                        nb += 1;
                    }
                    if ia && ib {
                        ni += 1;
                    }
                    if inside(&c, cx, cy) {
                        nc += 1;
                    }
                }
            }
            (na, nb, ni, nc)
        }

        pub fn iou(a: &BBox, b: &BBox, canvas: u32) -> f64 {
            let (na, nb, ni, _) = counts(a, b, canvas);
            ni as f64 / (na + nb - ni) as f64
        }

        pub fn giou(a: &BBox, b: &BBox, canvas: u32) -> f64 {
            let (na, nb, ni, nc) = counts(a, b, canvas);
            let union = na + nb - ni;
            ni as f64 / union as f64 - (nc - union) as f64 / nc as f64
        }
    }

    #[test]
    fn intersection_worked_values() {
        assert_eq!(intersection_area(&bx(0., 0., 10., 10.), &bx(5., 5., 15., 15.)), 25.0);
        assert_eq!(intersection_area(&bx(0., 0., 10., 10.), &bx(0., 0., 10., 10.)), 100.0);
        assert_eq!(intersection_area(&bx(0., 0., 1., 1.), &bx(2., 2., 3., 3.)), 0.0);
    }

    #[test]
    fn enclosing_worked_values() {
        assert_eq!(
            enclosing_box(&bx(0., 0., 10., 10.), &bx(5., 5., 15., 15.)),
            bx(0., 0., 15., 15.)
        );
        let a = bx(1., 2., 3., 4.);
        assert_eq!(enclosing_box(&a, &a), a);
        assert_eq!(
            enclosing_box(&bx(0., 0., 1., 1.), &bx(9., 9., 10., 10.)),
            bx(0., 0., 10., 10.)
        );
    }

    #[test]
    fn iou_worked_values() {
        let v = iou(&bx(0., 0., 10., 10.), &bx(5., 5., 15., 15.));
        assert!((v - 25.0 / 175.0).abs() < 1e-12);
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&bx(0., 0., 1., 1.), &bx(5., 5., 6., 6.)), 0.0);
    }

    #[test]
    fn giou_worked_values() {
        let v = giou(&bx(0., 0., 10., 10.), &bx(5., 5., 15., 15.));
        assert!((v - (25.0 / 175.0 - 50.0 / 225.0)).abs() < 1e-12);
        assert_eq!(giou(&bx(0., 0., 10., 10.), &bx(0., 0., 10., 10.)), 1.0);
        // touching, disjoint: union tiles the enclosing box exactly
        let v = giou(&bx(0., 0., 10., 10.), &bx(10., 0., 20., 10.));
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn bbox_rejects_invalid() {
        assert_eq!(
            BBox::new(0., 0., 0., 10.).unwrap_err(),
            BoxError::Degenerate { x1: 0., y1: 0., x2: 0., y2: 10. }
        );
        assert!(BBox::new(5., 0., 1., 10.).is_err());
        assert_eq!(BBox::new(0., 0., f64::NAN, 1.).unwrap_err(), BoxError::NonFinite);
        assert_eq!(BBox::new(0., 0., f64::INFINITY, 1.).unwrap_err(), BoxError::NonFinite);
    }

    #[test]
    fn aggregate_two_point_mean() {
        let trials = vec![
            Some(MetricPair { iou: 1.0, giou: 1.0 }),
            Some(MetricPair { iou: 0.0, giou: 0.0 }),
        ];
        let s = aggregate(&trials, FailurePolicy::Lenient);
        assert_eq!(s.mean_iou, Some(0.5));
        assert_eq!(s.mean_giou, Some(0.5));
        assert_eq!((s.n_scored, s.n_failed), (2, 0));
    }

    #[test]
    fn aggregate_all_failed_flags_undefined_means() {
        let s = aggregate(&[None, None, None], FailurePolicy::Lenient);
        assert_eq!(s.mean_iou, None);
        assert_eq!(s.mean_giou, None);
        assert_eq!((s.n_scored, s.n_failed), (0, 3));
    }

    #[test]
    fn aggregate_strict_scores_failures() {
        let trials = vec![Some(MetricPair { iou: 1.0, giou: 1.0 }), None];
        let s = aggregate(&trials, FailurePolicy::Strict);
        assert_eq!(s.mean_iou, Some(0.5));
        assert_eq!(s.mean_giou, Some(0.0));
        assert_eq!((s.n_scored, s.n_failed), (1, 1));
    }

    #[test]
    fn aggregate_empty_input() {
        let s = aggregate(&[], FailurePolicy::Strict);
        assert_eq!(s.mean_iou, None);
        assert_eq!((s.n_scored, s.n_failed), (0, 0));
    }

    fn int_box_strategy(canvas: u32) -> impl Strategy<Value = BBox> {
        let c = canvas as i64;
        (0..c, 0..c).prop_flat_map(move |(x1, y1)| {
            ((x1 + 1)..=c, (y1 + 1)..=c).prop_map(move |(x2, y2)| {
                BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).unwrap()
            })
        })
    }

    fn float_box_strategy() -> impl Strategy<Value = BBox> {
        (-500.0f64..500.0, -500.0f64..500.0, 0.001f64..400.0, 0.001f64..400.0)
            .prop_map(|(x1, y1, w, h)| BBox::new(x1, y1, x1 + w, y1 + h).unwrap())
    }

    proptest! {
        #[test]
        fn matches_rasterization_oracle(a in int_box_strategy(64), b in int_box_strategy(64)) {
            prop_assert!((iou(&a, &b) - oracle::iou(&a, &b, 64)).abs() < 1e-9);
            prop_assert!((giou(&a, &b) - oracle::giou(&a, &b, 64)).abs() < 1e-9);
        }

        #[test]
        fn symmetric_in_arguments(a in float_box_strategy(), b in float_box_strategy()) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(giou(&a, &b), giou(&b, &a));
        }

        #[test]
        fn bounds_hold(a in float_box_strategy(), b in float_box_strategy()) {
            let (i, g) = (iou(&a, &b), giou(&a, &b));
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert!(g > -1.0 && g <= 1.0);
            prop_assert!(g <= i + 1e-12);
        }

        #[test]
        fn giou_equals_iou_iff_union_tiles_enclosure(a in float_box_strategy(), b in float_box_strategy()) {
            let c = enclosing_box(&a, &b).area();
            let u = union_area(&a, &b);
            let equal = (giou(&a, &b) - iou(&a, &b)).abs() < 1e-12;
            prop_assert_eq!(equal, (c - u) / c < 1e-12);
        }

        #[test]
        fn identity_on_equal_boxes(a in float_box_strategy()) {
            prop_assert_eq!(iou(&a, &a), 1.0);
            prop_assert_eq!(giou(&a, &a), 1.0);
        }

        #[test]
        fn translation_invariant(a in int_box_strategy(64), b in int_box_strategy(64),
                                 dx in -100i32..100, dy in -100i32..100) {
            let (dx, dy) = (dx as f64, dy as f64);
            let (at, bt) = (a.translated(dx, dy).unwrap(), b.translated(dx, dy).unwrap());
            prop_assert!((iou(&a, &b) - iou(&at, &bt)).abs() < 1e-12);
            prop_assert!((giou(&a, &b) - giou(&at, &bt)).abs() < 1e-12);
        }

        #[test]
        fn scale_invariant(a in int_box_strategy(64), b in int_box_strategy(64), s in 0.01f64..64.0) {
            let (asc, bsc) = (a.scaled(s).unwrap(), b.scaled(s).unwrap());
            prop_assert!((iou(&a, &b) - iou(&asc, &bsc)).abs() < 1e-9);
            prop_assert!((giou(&a, &b) - giou(&asc, &bsc)).abs() < 1e-9);
        }
    }
}
