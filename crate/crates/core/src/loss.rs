//! Detection loss: objectness BCE on every cell, class BCE and smooth-L1 box
//! regression on cells that own a ground-truth centre.

use crate::autodiff::{sigmoid_scalar, Tape, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Channel layout of a raw head output: box offsets, objectness, classes.
pub const BOX_CHANNELS: usize = 4;
pub const OBJ_CHANNEL: usize = 4;
pub const CLASS_OFFSET: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub obj: f64,
    pub cls: f64,
    pub boxes: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            obj: 1.0,
            cls: 1.0,
            boxes: 1.0,
        }
    }
}

/// One positive cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellTarget {
    pub image: usize,
    pub row: usize,
    pub col: usize,
    /// Class index local to the head.
    pub class: usize,
    /// Centre offset inside the cell, in `[0, 1)`.
    pub offset: [f64; 2],
    /// `ln(extent / anchor)` for width and height.
    pub log_size: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTargets {
    pub batch: usize,
    pub grid: (usize, usize),
    pub num_classes: usize,
    pub cells: Vec<CellTarget>,
}

impl HeadTargets {
    /// Assign each box `(class, [x1, y1, x2, y2])` to the cell containing its
    /// centre. When two boxes share a cell the larger one wins; equal areas
    /// keep the earlier box.
    pub fn assign(
        boxes_per_image: &[Vec<(usize, [f64; 4])>],
        grid: (usize, usize),
        stride: f64,
        anchor: f64,
        num_classes: usize,
    ) -> Self {
        let mut cells: Vec<(CellTarget, f64)> = Vec::new();
        for (image, boxes) in boxes_per_image.iter().enumerate() {
            let start = cells.len();
            for &(class, b) in boxes {
                debug_assert!(class < num_classes);
                let (w, h) = (b[2] - b[0], b[3] - b[1]);
                let (cx, cy) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
                let col = ((cx / stride).floor().max(0.0) as usize).min(grid.1 - 1);
                let row = ((cy / stride).floor().max(0.0) as usize).min(grid.0 - 1);
                let t = CellTarget {
                    image,
                    row,
                    col,
                    class,
                    offset: [
                        (cx / stride - col as f64).clamp(0.0, 1.0),
                        (cy / stride - row as f64).clamp(0.0, 1.0),
                    ],
                    log_size: [(w / anchor).ln(), (h / anchor).ln()],
                };
                let area = w * h;
                match cells[start..].iter_mut().find(|(c, _)| c.row == row && c.col == col) {
                    Some(slot) if area > slot.1 => *slot = (t, area),
                    Some(_) => {}
                    None => cells.push((t, area)),
                }
            }
        }
        Self {
            batch: boxes_per_image.len(),
            grid,
            num_classes,
            cells: cells.into_iter().map(|(c, _)| c).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub obj: f64,
    pub cls: f64,
    pub boxes: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.obj + self.cls + self.boxes
    }
}

fn bce_logits(x: f64, t: f64) -> (f64, f64) {
    let value = x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
    (value, sigmoid_scalar(x) - t)
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Weighted sum of the three terms. Objectness is averaged over all cells of
/// the batch, class and box terms over the positive cells. Returns
/// the scalar loss on the tape and its unweighted components.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    raw: Var,
    targets: &HeadTargets,
    weights: &LossWeights,
) -> Result<(Var, LossParts)> {
    let (n, ch, h, w) = tape.value(raw).dims4("detection_loss")?;
    if n != targets.batch || (h, w) != targets.grid || ch != CLASS_OFFSET + targets.num_classes {
        return shape_err(
            "detection_loss",
            format!(
                "raw output {n}x{ch}x{h}x{w} does not match targets (batch {}, grid {:?}, {} classes)",
                targets.batch, targets.grid, targets.num_classes
            ),
        );
    }
    let x: Vec<f64> = tape.value(raw).to_f64_vec();
    let hw = h * w;
    let at = |img: usize, c: usize, r: usize, col: usize| ((img * ch + c) * h + r) * w + col;
    let mut grad = vec![0.0; x.len()];
    let mut parts = LossParts::default();
    let inv_cells = 1.0 / (n * hw) as f64;
    let inv_pos = 1.0 / targets.cells.len().max(1) as f64;

    let mut obj_target = vec![0.0; n * hw];
    for t in &targets.cells {
        obj_target[t.image * hw + t.row * w + t.col] = 1.0;
    }
    for img in 0..n {
        for cell in 0..hw {
            let i = at(img, OBJ_CHANNEL, 0, 0) + cell;
            let (v, g) = bce_logits(x[i], obj_target[img * hw + cell]);
            parts.obj += v * inv_cells;
            grad[i] += weights.obj * g * inv_cells;
        }
    }
    for t in &targets.cells {
        for c in 0..targets.num_classes {
            let i = at(t.image, CLASS_OFFSET + c, t.row, t.col);
            let target = if c == t.class { 1.0 } else { 0.0 };
            let (v, g) = bce_logits(x[i], target);
            parts.cls += v * inv_pos;
            grad[i] += weights.cls * g * inv_pos;
        }
        for axis in 0..2 {
            let i = at(t.image, axis, t.row, t.col);
            let s = sigmoid_scalar(x[i]);
            let (v, g) = smooth_l1(s - t.offset[axis]);
            parts.boxes += v * inv_pos;
            grad[i] += weights.boxes * g * s * (1.0 - s) * inv_pos;

            let j = at(t.image, 2 + axis, t.row, t.col);
            let (v, g) = smooth_l1(x[j] - t.log_size[axis]);
            parts.boxes += v * inv_pos;
            grad[j] += weights.boxes * g * inv_pos;
        }
    }
    let total = weights.obj * parts.obj + weights.cls * parts.cls + weights.boxes * parts.boxes;
    let var = tape.scalar_loss(raw, T::lit(total), grad.into_iter().map(T::lit).collect())?;
    Ok((var, parts))
}
