//! Helpers shared by the integration targets: an independent brute-force
//! evaluator and a generator of small random detection instances.

#![allow(dead_code)]

use arc_core::fusion::{BBox, Branch, Detection};
use arc_core::metrics::GroundTruth;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub dets: Vec<Detection>,
    pub gts: Vec<GroundTruth>,
    pub classes: Vec<usize>,
}

fn rand_box(rng: &mut ChaCha8Rng) -> BBox {
    let (x, y) = (rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0));
    let (w, h) = (rng.gen_range(2.0..16.0), rng.gen_range(2.0..16.0));
    BBox::new(x, y, x + w, y + h).unwrap()
}

fn jitter(b: &BBox, rng: &mut ChaCha8Rng) -> BBox {
    let s = 0.25 * b.width().min(b.height());
    let mut d = || rng.gen_range(-s..s);
    let (x1, y1) = (b.x1() + d(), b.y1() + d());
    let (x2, y2) = (b.x2() + d(), b.y2() + d());
    BBox::new(x1, y1, x2.max(x1 + 0.5), y2.max(y1 + 0.5)).unwrap()
}

/// Up to `max_dets` detections and `max_gts` truths over `max_classes`
/// classes and three images. About half of the detections are jittered
/// copies of a truth; confidences lie on a 1/1000 grid so ties occur.
pub fn instance(seed: u64, max_dets: usize, max_gts: usize, max_classes: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = rng.gen_range(1..=max_classes);
    let n_gts = rng.gen_range(0..=max_gts);
    let n_dets = rng.gen_range(0..=max_dets);
    let gts: Vec<GroundTruth> = (0..n_gts)
        .map(|_| GroundTruth {
            image_id: rng.gen_range(0..3),
            class_id: rng.gen_range(0..n_classes),
            bbox: rand_box(&mut rng),
        })
        .collect();
    let dets = (0..n_dets)
        .map(|_| {
            let confidence = rng.gen_range(0..=1000) as f64 / 1000.0;
            if !gts.is_empty() && rng.gen_bool(0.5) {
                let g = gts[rng.gen_range(0..gts.len())];
                let class_id = if rng.gen_bool(0.85) {
                    g.class_id
                } else {
                    rng.gen_range(0..n_classes)
                };
                Detection {
                    image_id: g.image_id,
                    bbox: jitter(&g.bbox, &mut rng),
                    class_id,
                    confidence,
                    branch: Branch::Context,
                }
            } else {
                Detection {
                    image_id: rng.gen_range(0..3),
                    bbox: rand_box(&mut rng),
                    class_id: rng.gen_range(0..n_classes),
                    confidence,
                    branch: Branch::Specialist,
                }
            }
        })
        .collect();
    Instance {
        dets,
        gts,
        classes: (0..n_classes).collect(),
    }
}

fn area(b: &BBox) -> f64 {
    (b.x2() - b.x1()) * (b.y2() - b.y1())
}

/// IoU from corner arithmetic, independent of the library's version.
pub fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = a.x2().min(b.x2()) - a.x1().max(b.x1());
    let h = a.y2().min(b.y2()) - a.y1().max(b.y1());
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h / (area(a) + area(b) - w * h)
    }
}

/// Matching by repeated selection: take the unprocessed detection with the
/// highest confidence (lowest index on ties), scan every truth, claim the
/// best one. Returns TP flags in processing order.
pub fn brute_match(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Vec<bool> {
    brute_match_claims(dets, gts, thr).0
}

/// TP flags in processing order and, per truth, whether it was claimed.
pub fn brute_match_claims(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> (Vec<bool>, Vec<bool>) {
    let mut done = vec![false; dets.len()];
    let mut claimed = vec![false; gts.len()];
    let mut seq = Vec::new();
    for _ in 0..dets.len() {
        let mut pick = None::<usize>;
        for i in 0..dets.len() {
            if !done[i] && pick.is_none_or(|p| dets[i].confidence > dets[p].confidence) {
                pick = Some(i);
            }
        }
        let i = pick.unwrap();
        done[i] = true;
        let mut best = None::<(usize, f64)>;
        for (j, g) in gts.iter().enumerate() {
            if claimed[j] || g.image_id != dets[i].image_id || g.class_id != dets[i].class_id {
                continue;
            }
            let o = overlap(&dets[i].bbox, &g.bbox);
            if o >= thr && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            claimed[j] = true;
        }
        seq.push(best.is_some());
    }
    (seq, claimed)
}

/// Interpolated precision at recall `r`: the best precision at any rank
/// whose recall reaches `r`.
pub fn brute_ap(seq: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if seq.is_empty() { None } else { Some(0.0) };
    }
    let mut ranks = Vec::new();
    let mut tp = 0;
    for (k, &hit) in seq.iter().enumerate() {
        tp += usize::from(hit);
        ranks.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        sum += ranks
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
    }
    Some(sum / 101.0)
}

pub struct BruteReport {
    pub map50: f64,
    pub map5095: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn brute_evaluate(inst: &Instance) -> BruteReport {
    let thresholds: Vec<f64> = (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect();
    let (mut m50, mut m, mut counted) = (0.0, 0.0, 0);
    let (mut tp, mut fp, mut ngt) = (0, 0, 0);
    for &c in &inst.classes {
        let dets: Vec<Detection> = inst.dets.iter().filter(|d| d.class_id == c).copied().collect();
        let gts: Vec<GroundTruth> = inst.gts.iter().filter(|g| g.class_id == c).copied().collect();
        ngt += gts.len();
        let aps: Vec<Option<f64>> = thresholds
            .iter()
            .map(|&t| brute_ap(&brute_match(&dets, &gts, t), gts.len()))
            .collect();
        if let Some(a50) = aps[0] {
            counted += 1;
            m50 += a50;
            m += aps.iter().map(|a| a.unwrap()).sum::<f64>() / 10.0;
        }
        // operating point: confidence-sorted flags, filtered by confidence
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| {
            dets[b]
                .confidence
                .partial_cmp(&dets[a].confidence)
                .unwrap()
                .then(a.cmp(&b))
        });
        for (k, hit) in brute_match(&dets, &gts, 0.5).into_iter().enumerate() {
            if dets[order[k]].confidence >= 0.25 {
                if hit {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
    }
    let n = counted.max(1) as f64;
    BruteReport {
        map50: if counted == 0 { 0.0 } else { m50 / n },
        map5095: if counted == 0 { 0.0 } else { m / n },
        precision: if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        },
        recall: if ngt == 0 { 0.0 } else { tp as f64 / ngt as f64 },
    }
}
