use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VARIANCES: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

/// Corner-form box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub const fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)
    }

    pub fn clip(&self) -> Self {
        let c = |v: f64| v.clamp(0.0, 1.0);
        Self::new(c(self.xmin), c(self.ymin), c(self.xmax), c(self.ymax))
    }

    pub fn is_valid(&self) -> bool {
        self.xmin <= self.xmax
            && self.ymin <= self.ymax
            && [self.xmin, self.ymin, self.xmax, self.ymax].iter().all(|v| v.is_finite())
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Center-size anchor box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl PriorBox {
    pub fn to_bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }

    pub fn from_bbox(b: &BBox) -> Self {
        let (cx, cy) = b.center();
        Self { cx, cy, w: b.width(), h: b.height() }
    }

    fn check(&self) -> Result<()> {
        if self.w > 0.0 && self.h > 0.0 {
            Ok(())
        } else {
            Err(Error::Geometry(format!("prior has non-positive size {}x{}", self.w, self.h)))
        }
    }
}

/// Center-size offsets of `gt` relative to `prior`, scaled by the variances.
pub fn encode_box(gt: &BBox, prior: &PriorBox) -> Result<[f64; 4]> {
    prior.check()?;
    let (w, h) = (gt.width(), gt.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::Geometry(format!("ground truth has non-positive size {w}x{h}")));
    }
    let (cx, cy) = gt.center();
    Ok([
        (cx - prior.cx) / (prior.w * VARIANCES[0]),
        (cy - prior.cy) / (prior.h * VARIANCES[1]),
        (w / prior.w).ln() / VARIANCES[2],
        (h / prior.h).ln() / VARIANCES[3],
    ])
}

pub fn decode_box(loc: [f64; 4], prior: &PriorBox) -> BBox {
    let cx = prior.cx + loc[0] * VARIANCES[0] * prior.w;
    let cy = prior.cy + loc[1] * VARIANCES[1] * prior.h;
    let w = prior.w * (loc[2] * VARIANCES[2]).exp();
    let h = prior.h * (loc[3] * VARIANCES[3]).exp();
    BBox::from_center(cx, cy, w, h)
}
