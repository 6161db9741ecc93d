//! COCO-style evaluation (101-point interpolated AP over IoU 0.50:0.05:0.95)
//! and the forgetting measure.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::fusion::{iou, BBox, Detection};

pub const NUM_IOU_THRESHOLDS: usize = 10;
pub const RECALL_POINTS: usize = 101;
/// Operating point for the single precision/recall figures.
pub const PR_CONFIDENCE: f64 = 0.25;
pub const PR_IOU: f64 = 0.5;

/// 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; NUM_IOU_THRESHOLDS] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

/// Detection indices ordered by confidence descending, ties by index.
pub fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// Indexed like the input detections.
    pub true_positive: Vec<bool>,
    pub false_negatives: usize,
}

/// Greedy matching in confidence order: each detection takes the unmatched
/// ground truth of the same image and class with the highest IoU, provided
/// that IoU reaches the threshold. Equal IoUs resolve to the earlier truth.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Matching {
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for i in confidence_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.image_id != d.image_id || g.class_id != d.class_id {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            tp[i] = true;
        }
    }
    Matching {
        true_positive: tp,
        false_negatives: taken.iter().filter(|t| !**t).count(),
    }
}

/// 101-point interpolated AP of a TP/FP sequence already sorted by
/// confidence. `None` when there is neither ground truth nor a detection.
pub fn average_precision(tp_sequence: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if tp_sequence.is_empty() { None } else { Some(0.0) };
    }
    let mut recall = Vec::with_capacity(tp_sequence.len());
    let mut precision = Vec::with_capacity(tp_sequence.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in tp_sequence {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // precision envelope
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    // The sampled index is non-decreasing in r; summing runs as
    // `count * precision` keeps round-off to one product per run.
    let mut total = 0.0;
    let mut run: Option<(usize, usize)> = None;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx >= precision.len() {
            break;
        }
        run = match run {
            Some((i, n)) if i == idx => Some((i, n + 1)),
            Some((i, n)) => {
                total += n as f64 * precision[i];
                Some((idx, 1))
            }
            None => Some((idx, 1)),
        };
    }
    if let Some((i, n)) = run {
        total += n as f64 * precision[i];
    }
    Some(total / RECALL_POINTS as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class_id: usize,
    pub num_gt: usize,
    pub num_dets: usize,
    /// AP per IoU threshold; `None` for classes with no truth and no
    /// detections, which are left out of the means.
    pub ap: Option<[f64; NUM_IOU_THRESHOLDS]>,
    /// Counts at the precision/recall operating point.
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub map50: f64,
    pub map5095: f64,
    pub precision: f64,
    pub recall: f64,
}

impl EvalReport {
    pub fn class(&self, class_id: usize) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }
}

/// Evaluate detections against ground truth for the classes in
/// `class_set`; detections and truths of other classes are ignored.
pub fn evaluate(dets: &[Detection], gts: &[GroundTruth], class_set: &[usize]) -> Result<EvalReport> {
    let classes: BTreeSet<usize> = class_set.iter().copied().collect();
    if classes.is_empty() {
        return Err(Error::Config("evaluation needs at least one class".into()));
    }
    let thresholds = iou_thresholds();
    let mut reports = Vec::with_capacity(classes.len());
    for &c in &classes {
        let cd: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
        let cg: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == c).copied().collect();
        let order = confidence_order(&cd);
        let mut ap = [0.0; NUM_IOU_THRESHOLDS];
        let mut defined = true;
        let mut at_pr = None;
        for (t, &thr) in thresholds.iter().enumerate() {
            let m = match_detections(&cd, &cg, thr);
            let seq: Vec<bool> = order.iter().map(|&i| m.true_positive[i]).collect();
            match average_precision(&seq, cg.len()) {
                Some(v) => ap[t] = v,
                None => defined = false,
            }
            if thr == PR_IOU {
                at_pr = Some(m);
            }
        }
        let m = at_pr.expect("0.5 is among the thresholds");
        let (mut tp, mut fp) = (0, 0);
        for (d, &hit) in cd.iter().zip(&m.true_positive) {
            if d.confidence >= PR_CONFIDENCE {
                if hit {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        reports.push(ClassReport {
            class_id: c,
            num_gt: cg.len(),
            num_dets: cd.len(),
            ap: defined.then_some(ap),
            tp,
            fp,
            fn_: cg.len() - tp,
        });
    }
    let included: Vec<&[f64; NUM_IOU_THRESHOLDS]> = reports.iter().filter_map(|r| r.ap.as_ref()).collect();
    let (map50, map5095) = if included.is_empty() {
        (0.0, 0.0)
    } else {
        let n = included.len() as f64;
        (
            included.iter().map(|a| a[0]).sum::<f64>() / n,
            included
                .iter()
                .map(|a| a.iter().sum::<f64>() / NUM_IOU_THRESHOLDS as f64)
                .sum::<f64>()
                / n,
        )
    };
    let tp: usize = reports.iter().map(|r| r.tp).sum();
    let fp: usize = reports.iter().map(|r| r.fp).sum();
    let gt: usize = reports.iter().map(|r| r.num_gt).sum();
    Ok(EvalReport {
        classes: reports,
        map50,
        map5095,
        precision: if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        },
        recall: if gt == 0 { 0.0 } else { tp as f64 / gt as f64 },
    })
}

/// Change in base-class mAP, in percentage points; negative means the
/// model forgot.
pub fn forgetting_measure(map_base_before: f64, map_base_after: f64) -> f64 {
    (map_base_after - map_base_before) * 100.0
}

/// The same change relative to the pre-adaptation value, in percent.
/// `None` when there was nothing to forget.
pub fn relative_forgetting(map_base_before: f64, map_base_after: f64) -> Option<f64> {
    (map_base_before > 0.0).then(|| (map_base_after - map_base_before) / map_base_before * 100.0)
}

// ---- serialization -------------------------------------------------------

/// Human-readable report. `names` maps class ids to labels.
pub fn render_text(report: &EvalReport, title: &str, names: &dyn Fn(usize) -> String) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {title}");
    let _ = writeln!(
        s,
        "# AP: 101-point interpolation; precision/recall at confidence {PR_CONFIDENCE:.2}, IoU {PR_IOU:.2}"
    );
    let _ = writeln!(
        s,
        "{:<14} {:>6} {:>6} {:>8} {:>10} {:>5} {:>5} {:>5}",
        "class", "gt", "dets", "AP@0.5", "AP@.5:.95", "TP", "FP", "FN"
    );
    for c in &report.classes {
        let (a50, a5095) = match &c.ap {
            Some(ap) => (
                format!("{:.4}", ap[0]),
                format!("{:.4}", ap.iter().sum::<f64>() / NUM_IOU_THRESHOLDS as f64),
            ),
            None => ("-".into(), "-".into()),
        };
        let _ = writeln!(
            s,
            "{:<14} {:>6} {:>6} {:>8} {:>10} {:>5} {:>5} {:>5}",
            names(c.class_id),
            c.num_gt,
            c.num_dets,
            a50,
            a5095,
            c.tp,
            c.fp,
            c.fn_
        );
    }
    let _ = writeln!(s, "mAP@0.5      {:.4}", report.map50);
    let _ = writeln!(s, "mAP@0.5:0.95 {:.4}", report.map5095);
    let _ = writeln!(s, "precision    {:.4}", report.precision);
    let _ = writeln!(s, "recall       {:.4}", report.recall);
    s
}

const CSV_HEADER: [&str; 4] = ["record", "class", "iou_threshold", "value"];

/// Machine-readable table. Values use shortest round-trip formatting so the
/// file parses back to an identical report.
pub fn write_csv<W: Write>(w: W, report: &EvalReport) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    wr.write_record(CSV_HEADER).map_err(csv_err)?;
    let thresholds = iou_thresholds();
    for c in &report.classes {
        let cls = c.class_id.to_string();
        for (name, v) in [
            ("num_gt", c.num_gt),
            ("num_dets", c.num_dets),
            ("tp", c.tp),
            ("fp", c.fp),
            ("fn", c.fn_),
        ] {
            wr.write_record([name, &cls, "", &v.to_string()]).map_err(csv_err)?;
        }
        if let Some(ap) = &c.ap {
            for (t, v) in thresholds.iter().zip(ap) {
                wr.write_record(["ap", &cls, &format!("{t:.2}"), &v.to_string()])
                    .map_err(csv_err)?;
            }
        }
    }
    for (name, v) in [
        ("map50", report.map50),
        ("map5095", report.map5095),
        ("precision", report.precision),
        ("recall", report.recall),
    ] {
        wr.write_record([name, "", "", &v.to_string()]).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<EvalReport> {
    let mut rd = csv::Reader::from_reader(r);
    let bad = |msg: String| Error::Parse(format!("eval table: {msg}"));
    let thresholds = iou_thresholds();
    let mut classes: Vec<ClassReport> = Vec::new();
    let mut summary = [None; 4];
    for rec in rd.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 columns, got {}", rec.len())));
        }
        let value = &rec[3];
        let class_slot = |classes: &mut Vec<ClassReport>| -> Result<usize> {
            let id: usize = rec[1].parse().map_err(|_| bad(format!("bad class `{}`", &rec[1])))?;
            Ok(match classes.iter().position(|c| c.class_id == id) {
                Some(i) => i,
                None => {
                    classes.push(ClassReport {
                        class_id: id,
                        num_gt: 0,
                        num_dets: 0,
                        ap: None,
                        tp: 0,
                        fp: 0,
                        fn_: 0,
                    });
                    classes.len() - 1
                }
            })
        };
        let count = || -> Result<usize> { value.parse().map_err(|_| bad(format!("bad count `{value}`"))) };
        let real = || -> Result<f64> { value.parse().map_err(|_| bad(format!("bad value `{value}`"))) };
        match &rec[0] {
            "num_gt" | "num_dets" | "tp" | "fp" | "fn" => {
                let i = class_slot(&mut classes)?;
                let n = count()?;
                let c = &mut classes[i];
                match &rec[0] {
                    "num_gt" => c.num_gt = n,
                    "num_dets" => c.num_dets = n,
                    "tp" => c.tp = n,
                    "fp" => c.fp = n,
                    _ => c.fn_ = n,
                }
            }
            "ap" => {
                let i = class_slot(&mut classes)?;
                let t = thresholds
                    .iter()
                    .position(|&t| format!("{t:.2}") == rec[2])
                    .ok_or_else(|| bad(format!("unknown IoU threshold `{}`", &rec[2])))?;
                classes[i].ap.get_or_insert([f64::NAN; NUM_IOU_THRESHOLDS])[t] = real()?;
            }
            "map50" => summary[0] = Some(real()?),
            "map5095" => summary[1] = Some(real()?),
            "precision" => summary[2] = Some(real()?),
            "recall" => summary[3] = Some(real()?),
            other => return Err(bad(format!("unknown record `{other}`"))),
        }
    }
    if classes
        .iter()
        .any(|c| c.ap.is_some_and(|a| a.iter().any(|v| v.is_nan())))
    {
        return Err(bad("incomplete AP rows".into()));
    }
    let get = |i: usize, name: &str| summary[i].ok_or_else(|| bad(format!("missing `{name}` row")));
    Ok(EvalReport {
        classes,
        map50: get(0, "map50")?,
        map5095: get(1, "map5095")?,
        precision: get(2, "precision")?,
        recall: get(3, "recall")?,
    })
}

/// Ground truth shares the detection record layout, with branch `gt` and
/// confidence 1.
pub fn format_ground_truth(g: &GroundTruth) -> String {
    let [x1, y1, x2, y2] = g.bbox.corners();
    format!(
        "{}\tgt\t{}\t{:.6}\t{x1:.2}\t{y1:.2}\t{x2:.2}\t{y2:.2}",
        g.image_id, g.class_id, 1.0
    )
}

pub fn write_ground_truth<W: Write>(mut w: W, gts: &[GroundTruth]) -> Result<()> {
    for g in gts {
        writeln!(w, "{}", format_ground_truth(g))?;
    }
    Ok(())
}

pub fn read_ground_truth<R: BufRead>(r: R) -> Result<Vec<GroundTruth>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        let bad = || Error::Parse(format!("ground truth line {}: `{line}`", i + 1));
        if parts.len() != 8 || parts[1] != "gt" {
            return Err(bad());
        }
        let num = |k: usize| parts[k].parse::<f64>().map_err(|_| bad());
        out.push(GroundTruth {
            image_id: parts[0].parse().map_err(|_| bad())?,
            class_id: parts[2].parse().map_err(|_| bad())?,
            bbox: BBox::new(num(4)?, num(5)?, num(6)?, num(7)?)?,
        });
    }
    Ok(out)
}
