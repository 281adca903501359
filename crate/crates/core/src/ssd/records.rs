//! JSON-lines interchange for detections and ground truth, one box per line.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::bbox::BBox;
use super::detect::Detection;
use super::matching::GroundTruth;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub image_id: String,
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BoxRecord {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.xmin, self.ymin, self.xmax, self.ymax)
    }

    pub fn from_detection(image_id: &str, d: &Detection) -> Self {
        let b = d.bbox;
        Self {
            image_id: image_id.to_string(),
            class_id: d.class_id,
            score: Some(d.score),
            xmin: b.xmin,
            ymin: b.ymin,
            xmax: b.xmax,
            ymax: b.ymax,
        }
    }

    pub fn from_ground_truth(image_id: &str, g: &GroundTruth) -> Self {
        let b = g.bbox;
        Self {
            image_id: image_id.to_string(),
            class_id: g.class_id,
            score: None,
            xmin: b.xmin,
            ymin: b.ymin,
            xmax: b.xmax,
            ymax: b.ymax,
        }
    }
}

/// Reads records, skipping blank lines. Errors name the offending line.
pub fn read_records(reader: impl BufRead) -> Result<Vec<BoxRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoxRecord = serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if !rec.bbox().is_valid() {
            return Err(Error::Format(format!("line {}: box corners out of order", i + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(mut writer: impl Write, records: &[BoxRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Groups detection and ground-truth records by image. The image order is the
/// sorted union of ids from both inputs.
pub fn group_by_image(
    dets: &[BoxRecord],
    gts: &[BoxRecord],
) -> Result<(Vec<String>, Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>)> {
    let mut images: BTreeMap<&str, (Vec<Detection>, Vec<GroundTruth>)> = BTreeMap::new();
    for r in dets {
        let score = r.score.ok_or_else(|| Error::Format(format!("detection for image {} has no score", r.image_id)))?;
        images.entry(&r.image_id).or_default().0.push(Detection { class_id: r.class_id, score, bbox: r.bbox() });
    }
    for r in gts {
        images.entry(&r.image_id).or_default().1.push(GroundTruth { class_id: r.class_id, bbox: r.bbox() });
    }
    let ids = images.keys().map(|k| k.to_string()).collect();
    let (d, g) = images.into_values().unzip();
    Ok((ids, d, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_optional_score() {
        let recs = vec![
            BoxRecord {
                image_id: "a".into(),
                class_id: 3,
                score: Some(0.5),
                xmin: 0.1,
                ymin: 0.2,
                xmax: 0.3,
                ymax: 0.4,
            },
            BoxRecord { image_id: "b".into(), class_id: 1, score: None, xmin: 0.0, ymin: 0.0, xmax: 1.0, ymax: 1.0 },
        ];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(!text.lines().nth(1).unwrap().contains("score"));
        assert_eq!(read_records(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn bad_line_is_reported() {
        let input = b"{\"image_id\":\"a\",\"class_id\":1,\"xmin\":0,\"ymin\":0,\"xmax\":1,\"ymax\":1}\n{oops}\n";
        match read_records(&input[..]) {
            Err(Error::Format(m)) => assert!(m.starts_with("line 2")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grouping_requires_scores() {
        let g =
            BoxRecord { image_id: "x".into(), class_id: 1, score: None, xmin: 0.0, ymin: 0.0, xmax: 0.5, ymax: 0.5 };
        assert!(group_by_image(std::slice::from_ref(&g), &[]).is_err());
        let (ids, d, gts) = group_by_image(&[], &[g]).unwrap();
        assert_eq!(ids, vec!["x"]);
        assert!(d[0].is_empty());
        assert_eq!(gts[0].len(), 1);
    }
}
