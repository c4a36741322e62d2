//! Box geometry: center/corner conversions, IoU and generalized IoU.
//!
//! Two routes exist on purpose. The scalar functions here drive matching
//! costs and evaluation; `losses::giou_pairs` rebuilds the same formula
//! from tape primitives so box gradients flow. Tests pin the two routes
//! against each other.

/// Normalized (cx, cy, w, h), all in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCxcywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form (x1, y1, x2, y2) with x1 <= x2, y1 <= y2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Enclosing-area floor guarding degenerate zero-area configurations.
pub const AREA_FLOOR: f64 = 1e-7;

impl BoxCxcywh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxCxcywh { cx, cy, w, h }
    }

    pub fn to_xyxy(self) -> BoxXyxy {
        BoxXyxy {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxCxcywh { cx: a[0], cy: a[1], w: a[2], h: a[3] }
    }

    pub fn as_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

impl BoxXyxy {
    pub fn to_cxcywh(self) -> BoxCxcywh {
        BoxCxcywh {
            cx: (self.x1 + self.x2) / 2.0,
            cy: (self.y1 + self.y2) / 2.0,
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    pub fn area(self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

pub fn iou(a: BoxXyxy, b: BoxXyxy) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU minus the normalized dead area of the smallest enclosing box.
/// Range (-1, 1]; equals IoU for touching/overlapping boxes sharing an
/// enclosing hull.
pub fn giou(a: BoxXyxy, b: BoxXyxy) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = (a.area() + b.area() - inter).max(AREA_FLOOR);
    let ex = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ey = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclose = (ex * ey).max(AREA_FLOOR);
    inter / union - (enclose - union) / enclose
}

/// L1 distance between two boxes in center form (sum over 4 coordinates).
pub fn box_l1(a: BoxCxcywh, b: BoxCxcywh) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}
