use serde::{Deserialize, Serialize};

use super::bbox::PriorBox;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub map_sizes: Vec<usize>,
    pub anchors_per_cell: Vec<usize>,
    pub scale_min: f64,
    pub scale_max: f64,
    pub clip: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            map_sizes: vec![38, 19, 10, 5, 3, 1],
            anchors_per_cell: vec![4, 6, 6, 6, 4, 4],
            scale_min: 0.2,
            scale_max: 0.9,
            clip: true,
        }
    }
}

impl PriorConfig {
    /// Scale of each map, linear from `scale_min` to `scale_max`, plus one
    /// more step past the last map for its extra square anchor.
    pub fn scales(&self) -> Vec<f64> {
        let m = self.map_sizes.len();
        let step = if m > 1 { (self.scale_max - self.scale_min) / (m - 1) as f64 } else { 0.0 };
        (0..=m).map(|k| self.scale_min + step * k as f64).collect()
    }

    pub fn prior_count(&self) -> usize {
        self.map_sizes.iter().zip(&self.anchors_per_cell).map(|(s, a)| s * s * a).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.map_sizes.len() != self.anchors_per_cell.len() || self.map_sizes.is_empty() {
            return Err(Error::Config("one anchor count is needed per map".into()));
        }
        if let Some(a) = self.anchors_per_cell.iter().find(|&&a| a != 4 && a != 6) {
            return Err(Error::Config(format!("{a} anchors per cell has no aspect-ratio set (use 4 or 6)")));
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max) {
            return Err(Error::Config(format!("bad scale range {}..{}", self.scale_min, self.scale_max)));
        }
        if self.map_sizes.contains(&0) {
            return Err(Error::Config("map size 0".into()));
        }
        Ok(())
    }
}

/// Anchor boxes in head order: map by map, then row, column and anchor.
/// Each cell gets ratio 1 at `s_k`, ratio 1 at `sqrt(s_k · s_{k+1})`, then
/// ratios 2 and 1/2, then 3 and 1/3 on six-anchor maps.
pub fn generate_priors(cfg: &PriorConfig) -> Result<Vec<PriorBox>> {
    cfg.validate()?;
    let scales = cfg.scales();
    let mut out = Vec::with_capacity(cfg.prior_count());
    for (k, (&size, &anchors)) in cfg.map_sizes.iter().zip(&cfg.anchors_per_cell).enumerate() {
        let s = scales[k];
        let extra = (s * scales[k + 1]).sqrt();
        let mut shapes = vec![(s, s), (extra, extra)];
        let ratios: &[f64] = if anchors == 6 { &[2.0, 3.0] } else { &[2.0] };
        for &r in ratios {
            let q = r.sqrt();
            shapes.push((s * q, s / q));
            shapes.push((s / q, s * q));
        }
        for i in 0..size {
            for j in 0..size {
                let cx = (j as f64 + 0.5) / size as f64;
                let cy = (i as f64 + 0.5) / size as f64;
                for &(w, h) in &shapes {
                    let p = PriorBox { cx, cy, w, h };
                    out.push(if cfg.clip { PriorBox::from_bbox(&p.to_bbox().clip()) } else { p });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let cfg = PriorConfig::default();
        let priors = generate_priors(&cfg).unwrap();
        assert_eq!(priors.len(), 8732);
        let first = PriorConfig { map_sizes: vec![38], anchors_per_cell: vec![4], ..cfg };
        assert_eq!(generate_priors(&first).unwrap().len(), 5776);
    }

    #[test]
    fn clipped_priors_in_unit_square() {
        for p in generate_priors(&PriorConfig::default()).unwrap() {
            let b = p.to_bbox();
            for v in [b.xmin, b.ymin, b.xmax, b.ymax] {
                assert!((-1e-12..=1.0 + 1e-12).contains(&v));
            }
            assert!(p.w > 0.0 && p.h > 0.0);
        }
    }

    #[test]
    fn single_cell_center() {
        let cfg = PriorConfig { map_sizes: vec![1], anchors_per_cell: vec![4], ..Default::default() };
        for p in generate_priors(&cfg).unwrap() {
            assert_eq!((p.cx, p.cy), (0.5, 0.5));
        }
    }

    #[test]
    fn scale_ladder() {
        let s = PriorConfig::default().scales();
        let expect = [0.2, 0.34, 0.48, 0.62, 0.76, 0.9, 1.04];
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let cfg = PriorConfig { clip: false, ..Default::default() };
        let p = generate_priors(&cfg).unwrap();
        assert!((p[1].w - (0.2f64 * 0.34).sqrt()).abs() < 1e-12);
        assert!((p[2].w / p[2].h - 2.0).abs() < 1e-12);
        let six = &p[5776..];
        assert!((six[5].h / six[5].w - 3.0).abs() < 1e-12);
        let last = p.last().unwrap();
        assert!((last.h * last.w - 0.9 * 0.9).abs() < 1e-12);
    }

    #[test]
    fn unsupported_anchor_count() {
        let cfg = PriorConfig { anchors_per_cell: vec![4, 6, 5, 6, 4, 4], ..Default::default() };
        assert!(matches!(generate_priors(&cfg), Err(Error::Config(_))));
    }
}
