//! Axis-aligned boxes in scene coordinates.

use serde::{Deserialize, Serialize};

/// Box as corner coordinates, serialized as `[x1, y1, x2, y2]`.
///
/// A valid box has `x2 > x1` and `y2 > y1`; degenerate boxes are rejected at
/// construction and deserialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Rect {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> crate::Result<Rect> {
        let r = Rect { x1, y1, x2, y2 };
        r.check()?;
        Ok(r)
    }

    fn check(&self) -> crate::Result<()> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(crate::Error::NonFinite("box coordinates".into()));
        }
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(crate::Error::config(format!(
                "degenerate box [{}, {}, {}, {}]",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

impl TryFrom<[f64; 4]> for Rect {
    type Error = crate::Error;

    fn try_from(v: [f64; 4]) -> crate::Result<Rect> {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [f64; 4] {
    fn from(r: Rect) -> [f64; 4] {
        [r.x1, r.y1, r.x2, r.y2]
    }
}

/// Intersection-over-union of two boxes. Zero when they do not overlap.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x1: f64, y1: f64, x2: f64, y2: f64) -> Rect {
        Rect::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_identical_box_is_one() {
        let a = rect(0.1, 0.2, 0.5, 0.9);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = rect(0.0, 0.0, 1.0, 1.0);
        let b = rect(2.0, 2.0, 3.0, 3.0);
        assert_eq!(iou(&a, &b), 0.0);
        let touching = rect(1.0, 0.0, 2.0, 1.0);
        assert_eq!(iou(&a, &touching), 0.0);
    }

    #[test]
    fn iou_half_overlap() {
        // Unit squares offset by half a side: inter 1*2 = 2, union 4+4-2 = 6.
        let a = rect(0.0, 0.0, 2.0, 2.0);
        let b = rect(1.0, 0.0, 3.0, 2.0);
        let got = iou(&a, &b);
        assert!((got - 1.0 / 3.0).abs() < 1e-15, "got {got}");
    }

    #[test]
    fn iou_is_symmetric_and_bounded() {
        let a = rect(0.0, 0.0, 1.5, 1.0);
        let b = rect(0.5, 0.25, 2.0, 2.0);
        assert_eq!(iou(&a, &b), iou(&b, &a));
        assert!(iou(&a, &b) > 0.0 && iou(&a, &b) < 1.0);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(Rect::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(Rect::new(0.0, 0.0, 1.0, f64::NAN).is_err());
        assert!(Rect::new(0.5, 0.0, 0.4, 1.0).is_err());
    }

    #[test]
    fn rect_roundtrips_through_json() {
        let a = rect(0.125, 0.25, 0.625, 0.875);
        let text = serde_json::to_string(&a).unwrap();
        assert_eq!(text, "[0.125,0.25,0.625,0.875]");
        let back: Rect = serde_json::from_str(&text).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn rect_json_rejects_degenerate() {
        assert!(serde_json::from_str::<Rect>("[0.5,0.0,0.5,1.0]").is_err());
    }
}
