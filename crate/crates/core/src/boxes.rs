use serde::{Deserialize, Serialize};

/// Axis-aligned box in continuous image pixel coordinates; `x2`/`y2` are
/// the right/bottom edges, so width is `x2 - x1`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct RoiBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl RoiBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_ordered(&self) -> bool {
        self.x2 >= self.x1 && self.y2 >= self.y1
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn clip(&self, width: f64, height: f64) -> RoiBox {
        RoiBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    /// Mirror image across the vertical axis of an image `image_width` wide.
    pub fn flip_horizontal(&self, image_width: f64) -> RoiBox {
        RoiBox {
            x1: image_width - self.x2,
            y1: self.y1,
            x2: image_width - self.x1,
            y2: self.y2,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl From<[f64; 4]> for RoiBox {
    fn from(a: [f64; 4]) -> Self {
        Self::from_array(a)
    }
}

impl From<RoiBox> for [f64; 4] {
    fn from(b: RoiBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &RoiBox, b: &RoiBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let a = RoiBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &RoiBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &RoiBox::new(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
        let p = RoiBox::new(3.0, 3.0, 3.0, 3.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn flip_is_involution() {
        let b = RoiBox::new(1.5, 2.0, 7.25, 9.0);
        assert_eq!(b.flip_horizontal(20.0).flip_horizontal(20.0), b);
        assert_eq!(b.flip_horizontal(20.0).width(), b.width());
    }
}
