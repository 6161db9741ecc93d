//! Central finite-difference checks of analytic gradients.
//!
//! Relative error per element is `|analytic - numeric| / max(|analytic|,
//! |numeric|, REL_ERR_FLOOR)`; the floor keeps elements whose true gradient
//! is (near) zero from dividing round-off noise by zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::bridge::{bridge_forward, BridgeConfig, BridgeState};
use crate::error::Result;
use crate::loss::{detection_loss, CellTarget, HeadTargets, LossWeights};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;
pub const REL_ERR_FLOOR: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Number of scalar coordinates compared.
    pub checked: usize,
}

/// Compare the tape gradient of `f` against central differences with
/// respect to every input tensor and every trainable parameter in `store`.
/// `f` receives the inputs as gradient-carrying leaves and must return a
/// one-element loss.
pub fn check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, store, &vars)?;
        Ok(tape.value(loss).values()[0])
    };

    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &analytic_store, &vars)?;
    let grads = tape.backward_into(loss, &mut analytic_store)?;

    let mut worst = 0.0f64;
    let mut checked = 0;

    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].numel()];
        let analytic = grads.wrt(*var).unwrap_or(&zeros).to_vec();
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].values()[j];
            probe[i].values_mut()[j] = orig + eps;
            let up = eval(store, &probe)?;
            probe[i].values_mut()[j] = orig - eps;
            let down = eval(store, &probe)?;
            probe[i].values_mut()[j] = orig;
            worst = worst.max(rel_err(analytic[j], (up - down) / (2.0 * eps)));
            checked += 1;
        }
    }

    let mut perturbed = store.clone();
    for (id, p) in store.iter() {
        if p.frozen {
            continue;
        }
        let zeros = vec![0.0; p.tensor.numel()];
        let analytic = analytic_store.get(id).tensor.grad.clone().unwrap_or(zeros);
        for j in 0..p.tensor.numel() {
            let orig = p.tensor.values()[j];
            perturbed.get_mut(id).tensor.values_mut()[j] = orig + eps;
            let up = eval(&perturbed, inputs)?;
            perturbed.get_mut(id).tensor.values_mut()[j] = orig - eps;
            let down = eval(&perturbed, inputs)?;
            perturbed.get_mut(id).tensor.values_mut()[j] = orig;
            worst = worst.max(rel_err(analytic[j], (up - down) / (2.0 * eps)));
            checked += 1;
        }
    }
    Ok(GradcheckReport {
        max_rel_err: worst,
        checked,
    })
}

/// Reduce `y` to a scalar with fixed random weights so that every output
/// element contributes a distinct upstream gradient.
pub fn random_functional(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub const SUITE_OPS: [&str; 13] = [
    "conv2d",
    "conv2d_strided",
    "global_avg_pool",
    "global_max_pool",
    "linear",
    "sigmoid",
    "relu",
    "mul",
    "mul_broadcast",
    "add",
    "scale",
    "detection_loss",
    "bridge",
];

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

/// One random instance of the named check.
pub fn check_op(op: &str, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let empty = ParamStore::new();
    match op {
        "conv2d" => {
            let r = uniform(&[1, 2, 8, 8], &mut rng);
            let inputs = [
                uniform(&[1, 4, 8, 8], &mut rng),
                uniform(&[2, 4, 7, 7], &mut rng),
                uniform(&[2], &mut rng),
            ];
            check(&empty, &inputs, FD_EPS, |t, _, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 3)?;
                random_functional(t, y, &r)
            })
        }
        "conv2d_strided" => {
            let r = uniform(&[2, 3, 3, 3], &mut rng);
            let inputs = [
                uniform(&[2, 2, 6, 6], &mut rng),
                uniform(&[3, 2, 4, 4], &mut rng),
                uniform(&[3], &mut rng),
            ];
            check(&empty, &inputs, FD_EPS, |t, _, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
                random_functional(t, y, &r)
            })
        }
        "global_avg_pool" | "global_max_pool" => {
            let r = uniform(&[2, 3, 1, 1], &mut rng);
            let inputs = [uniform(&[2, 3, 5, 5], &mut rng)];
            let max = op == "global_max_pool";
            check(&empty, &inputs, FD_EPS, |t, _, v| {
                let y = if max {
                    t.global_max_pool(v[0])?
                } else {
                    t.global_avg_pool(v[0])?
                };
                random_functional(t, y, &r)
            })
        }
        "linear" => {
            let r = uniform(&[2, 4], &mut rng);
            let inputs = [
                uniform(&[2, 3], &mut rng),
                uniform(&[4, 3], &mut rng),
                uniform(&[4], &mut rng),
            ];
            check(&empty, &inputs, FD_EPS, |t, _, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                random_functional(t, y, &r)
            })
        }
        "sigmoid" | "relu" => {
            let r = uniform(&[3, 4], &mut rng);
            let inputs = [Tensor::uniform(&[3, 4], 4.0, &mut rng)];
            let sig = op == "sigmoid";
            check(&empty, &inputs, FD_EPS, |t, _, v| {
                let y = if sig { t.sigmoid(v[0]) } else { t.relu(v[0]) };
                random_functional(t, y, &r)
            })
        }
        "mul" | "add" => {
            let r = uniform(&[1, 2, 3, 3], &mut rng);
            let inputs = [uniform(&[1, 2, 3, 3], &mut rng), uniform(&[1, 2, 3, 3], &mut rng)];
            let is_mul = op == "mul";
            check(&empty, &inputs, FD_EPS, |t, _, v| {
                let y = if is_mul { t.mul(v[0], v[1])? } else { t.add(v[0], v[1])? };
                random_functional(t, y, &r)
            })
        }
        "mul_broadcast" => {
            let r = uniform(&[2, 3, 4, 4], &mut rng);
            let inputs = [
                uniform(&[2, 3, 4, 4], &mut rng),
                uniform(&[2, 3, 1, 1], &mut rng),
                uniform(&[2, 1, 4, 4], &mut rng),
            ];
            check(&empty, &inputs, FD_EPS, |t, _, v| {
                let y = t.mul(v[0], v[1])?;
                let y = t.mul(y, v[2])?;
                random_functional(t, y, &r)
            })
        }
        "scale" => {
            let r = uniform(&[2, 5], &mut rng);
            let inputs = [uniform(&[2, 5], &mut rng), uniform(&[1], &mut rng)];
            check(&empty, &inputs, FD_EPS, |t, _, v| {
                let y = t.scale(v[0], v[1])?;
                random_functional(t, y, &r)
            })
        }
        "detection_loss" => {
            let (n, classes, gh, gw) = (2, 2, 3, 3);
            let mut cells = Vec::new();
            for image in 0..n {
                for _ in 0..2 {
                    cells.push(CellTarget {
                        image,
                        row: rng.gen_range(0..gh),
                        col: rng.gen_range(0..gw),
                        class: rng.gen_range(0..classes),
                        offset: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
                        log_size: [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                    });
                }
            }
            let targets = HeadTargets {
                batch: n,
                grid: (gh, gw),
                num_classes: classes,
                cells,
            };
            let inputs = [Tensor::uniform(&[n, 5 + classes, gh, gw], 3.0, &mut rng)];
            let weights = LossWeights {
                obj: 1.0,
                cls: 0.7,
                boxes: 1.3,
            };
            check(&empty, &inputs, FD_EPS, |t, _, v| {
                Ok(detection_loss(t, v[0], &targets, &weights)?.0)
            })
        }
        "bridge" => {
            let cfg = BridgeConfig {
                reduction: 4,
                ..BridgeConfig::new(8, 4)
            };
            let mut store = ParamStore::new();
            let state = BridgeState::init(&mut store, "bridge.0.", &cfg, &mut rng)?;
            randomize_bridge(&mut store, &state, &mut rng);
            let r = uniform(&[1, 4, 6, 6], &mut rng);
            let inputs = [uniform(&[1, 4, 6, 6], &mut rng), uniform(&[1, 8, 6, 6], &mut rng)];
            check(&store, &inputs, FD_EPS, |t, s, v| {
                let y = bridge_forward(t, s, &state, v[0], v[1])?;
                random_functional(t, y, &r)
            })
        }
        other => Err(crate::error::Error::Config(format!("unknown gradcheck op `{other}`"))),
    }
}

/// Replace zero biases and alpha with random values so that no gradient
/// path is trivially switched off.
pub fn randomize_bridge(store: &mut ParamStore<f64>, state: &BridgeState, rng: &mut ChaCha8Rng) {
    for id in state.ids() {
        let shape = store.get(id).tensor.shape().to_vec();
        store.get_mut(id).tensor = Tensor::uniform(&shape, 0.8, rng);
    }
}

/// Run every check in [`SUITE_OPS`] on `cases` seeds derived from `seed`.
pub fn run_suite(seed: u64, cases: usize) -> Result<Vec<OpCheck>> {
    SUITE_OPS
        .iter()
        .map(|&op| {
            let mut worst = 0.0f64;
            for case in 0..cases {
                let case_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(case as u64);
                worst = worst.max(check_op(op, case_seed)?.max_rel_err);
            }
            Ok(OpCheck {
                op,
                cases,
                max_rel_err: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_seeds() {
        for c in run_suite(7, 2).unwrap() {
            assert!(c.passed(), "{} max rel err {}", c.op, c.max_rel_err);
        }
    }

    #[test]
    fn sign_flipped_sigmoid_backward_is_caught() {
        crate::autodiff::fault::set_sigmoid_sign_flip(true);
        let sig = check_op("sigmoid", 3).unwrap();
        let bridge = check_op("bridge", 3).unwrap();
        crate::autodiff::fault::set_sigmoid_sign_flip(false);
        assert!(sig.max_rel_err > 1.0);
        assert!(bridge.max_rel_err > TOLERANCE);
        assert!(check_op("sigmoid", 3).unwrap().max_rel_err < TOLERANCE);
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(check_op("softmax", 0).is_err());
    }
}
