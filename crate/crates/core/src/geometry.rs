//! Axis-aligned box arithmetic.
//!
//! Boxes use the COCO `[x, y, width, height]` encoding with a top-left
//! origin. IoU drives detection matching in the evaluator; GIoU and the
//! size strata are exposed for the loss-side and reporting code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound (exclusive) of the small stratum, in square pixels.
pub const SMALL_MAX_AREA: f64 = 32.0 * 32.0;
/// Upper bound (exclusive) of the medium stratum, in square pixels.
pub const MEDIUM_MAX_AREA: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::try_new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    /// Builds a box without validation. Use [`BBox::try_new`] on untrusted input.
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn try_new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let reason = if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            Some("non-finite coordinate")
        } else if self.w < 0.0 || self.h < 0.0 {
            Some("negative extent")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidBox {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                reason,
            }),
            None => Ok(()),
        }
    }

    #[inline]
    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    #[inline]
    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    /// Intersection with the rectangle `[x0, x1] × [y0, y1]`; empty results
    /// collapse to zero extent at the clamped corner, and an axis already
    /// inside the window keeps its exact coordinates.
    pub fn clip(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        fn axis(lo: f64, len: f64, w0: f64, w1: f64) -> (f64, f64) {
            if lo >= w0 && lo + len <= w1 {
                return (lo, len);
            }
            let l = lo.clamp(w0, w1);
            (l, ((lo + len).clamp(w0, w1) - l).max(0.0))
        }
        let (x, w) = axis(self.x, self.w, x0, x1);
        let (y, h) = axis(self.y, self.h, y0, y1);
        BBox::new(x, y, w, h)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Smallest box enclosing both operands.
    pub fn hull(&self, other: &BBox) -> BBox {
        let l = self.x.min(other.x);
        let t = self.y.min(other.y);
        let r = self.right().max(other.right());
        let b = self.bottom().max(other.bottom());
        BBox::new(l, t, r - l, b - t)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Generalized IoU: `IoU − (hull − union) / hull`.
    ///
    /// Fails with [`Error::DegenerateBoxes`] when both boxes have zero area.
    pub fn giou(&self, other: &BBox) -> Result<f64> {
        if self.area() <= 0.0 && other.area() <= 0.0 {
            return Err(Error::DegenerateBoxes);
        }
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        let hull = self.hull(other).area();
        let iou = inter / union;
        Ok(iou - (hull - union) / hull)
    }

    pub fn size_class(&self) -> SizeClass {
        SizeClass::from_area(self.area())
    }
}

pub fn area(b: &BBox) -> f64 {
    b.area()
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    a.giou(b)
}

pub fn size_class(b: &BBox) -> SizeClass {
    b.size_class()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    /// `small < 32²`, `32² ≤ medium < 96²`, `large ≥ 96²`.
    pub fn from_area(area: f64) -> SizeClass {
        if area < SMALL_MAX_AREA {
            SizeClass::Small
        } else if area < MEDIUM_MAX_AREA {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }
}
