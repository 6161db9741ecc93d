//! Box geometry, per-class NMS and the context veto applied at inference.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates with `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::Parse(format!("degenerate box ({x1}, {y1}, {x2}, {y2})")));
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
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Context,
    Specialist,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Context => "context",
            Branch::Specialist => "specialist",
        })
    }
}

impl FromStr for Branch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context" => Ok(Branch::Context),
            "specialist" => Ok(Branch::Specialist),
            other => Err(Error::Parse(format!("unknown branch `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub image_id: usize,
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
    pub branch: Branch,
}

/// Greedy per-class suppression. Candidates are visited by confidence
/// (descending, ties by input index); a candidate is dropped when its IoU
/// with an already kept box of the same image and class exceeds the
/// threshold. Output is in visiting order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.image_id == d.image_id && k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VetoConfig {
    pub iou_threshold: f64,
    /// Minimum confidence of a context detection for it to veto.
    pub context_confidence_floor: f64,
}

impl Default for VetoConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            context_confidence_floor: 0.5,
        }
    }
}

/// All context detections, followed by the specialist detections that no
/// confident context detection in the same image overlaps by more than the
/// IoU threshold. The veto ignores class identity.
pub fn veto_fuse(context: &[Detection], specialist: &[Detection], cfg: &VetoConfig) -> Vec<Detection> {
    let mut out = context.to_vec();
    out.extend(specialist.iter().copied().filter(|s| {
        !context.iter().any(|c| {
            c.image_id == s.image_id
                && c.confidence >= cfg.context_confidence_floor
                && iou(&c.bbox, &s.bbox) > cfg.iou_threshold
        })
    }));
    out
}

/// One tab-separated record: `image_id branch class_id confidence x1 y1 x2 y2`.
pub fn format_detection(d: &Detection) -> String {
    format!(
        "{}\t{}\t{}\t{:.6}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
        d.image_id, d.branch, d.class_id, d.confidence, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2
    )
}

fn field<T: FromStr>(parts: &[&str], i: usize, line_no: usize) -> Result<T> {
    parts[i]
        .parse()
        .map_err(|_| Error::Parse(format!("line {line_no}: bad field {} `{}`", i + 1, parts[i])))
}

pub fn parse_detection(line: &str, line_no: usize) -> Result<Detection> {
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != 8 {
        return Err(Error::Parse(format!(
            "line {line_no}: expected 8 tab-separated fields, got {}",
            parts.len()
        )));
    }
    let confidence: f64 = field(&parts, 3, line_no)?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::Parse(format!(
            "line {line_no}: confidence {confidence} outside [0, 1]"
        )));
    }
    Ok(Detection {
        image_id: field(&parts, 0, line_no)?,
        branch: parts[1].parse()?,
        class_id: field(&parts, 2, line_no)?,
        confidence,
        bbox: BBox::new(
            field(&parts, 4, line_no)?,
            field(&parts, 5, line_no)?,
            field(&parts, 6, line_no)?,
            field(&parts, 7, line_no)?,
        )?,
    })
}

pub fn write_detections<W: Write>(mut w: W, dets: &[Detection]) -> Result<()> {
    for d in dets {
        writeln!(w, "{}", format_detection(d))?;
    }
    Ok(())
}

pub fn read_detections<R: BufRead>(r: R) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(parse_detection(line.trim_end_matches('\r'), i + 1)?);
    }
    Ok(out)
}
