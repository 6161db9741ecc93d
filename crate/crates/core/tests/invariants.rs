//! Frozen isolation, shape algebra and determinism.

use arc_core::loss::{detection_loss, LossWeights};
use arc_core::model::{build_arc, ArcConfig, ArcModel, BackboneConfig, Detector};
use arc_core::synth::{batch_tensor, generate, ClassMix, Scene, SceneSpec};
use arc_core::trainer::{OptimConfig, Sgd};
use arc_core::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        widths: vec![4, 6, 8],
        ..BackboneConfig::default()
    }
}

fn small_arc(seed: u64) -> ArcModel<f64> {
    let det = Detector::<f64>::new(small_backbone(), 3, 6, seed).unwrap();
    let ck = arc_core::checkpoint::Checkpoint::from_store(&det.store);
    let cfg = ArcConfig {
        head_hidden: 6,
        specialist_hidden: 6,
        ..ArcConfig::default()
    };
    build_arc(&ck, 64, &cfg, seed ^ 0x5eed).unwrap()
}

fn scenes(seed: u64) -> Vec<Scene> {
    generate(&SceneSpec::default(), seed, 2, ClassMix::Mixed).unwrap()
}

/// Loss of every specialist on `scenes`, backpropagated into the store.
fn backprop(arc: &mut ArcModel<f64>, scenes: &[Scene]) -> f64 {
    let refs: Vec<&Scene> = scenes.iter().collect();
    let grid = arc.backbone.config.grid();
    let geom = arc.geometry();
    let mut tape = Tape::new();
    let x = tape.constant(batch_tensor(&refs).unwrap());
    let f = arc.features(&mut tape, x).unwrap();
    let mut total = 0.0;
    for i in 0..arc.specialists.len() {
        let raw = arc.specialist_forward(&mut tape, i, f).unwrap();
        let targets = arc.specialists[i].head.targets(&refs, grid, &geom);
        let (loss, parts) = detection_loss(&mut tape, raw, &targets, &LossWeights::default()).unwrap();
        tape.backward_into(loss, &mut arc.store).unwrap();
        total += parts.total();
    }
    total
}

/// Name, frozen flag, value bits and gradient bits per parameter.
type Snapshot = Vec<(String, bool, Vec<u64>, Option<Vec<u64>>)>;

fn snapshot(store: &ParamStore<f64>) -> Snapshot {
    store
        .iter()
        .map(|(_, p)| {
            (
                p.name.clone(),
                p.frozen,
                p.tensor.values().iter().map(|v| v.to_bits()).collect(),
                p.tensor.grad.as_ref().map(|g| g.iter().map(|v| v.to_bits()).collect()),
            )
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn frozen_parameters_get_no_gradient_and_never_move(seed in any::<u64>()) {
        let mut arc = small_arc(seed);
        let data = scenes(seed);
        backprop(&mut arc, &data);
        let before = snapshot(&arc.store);
        for (name, frozen, _, grad) in &before {
            prop_assert_eq!(grad.is_none(), *frozen, "{}", name);
        }
        let mut sgd = Sgd::new(&arc.store, &OptimConfig::default());
        sgd.step(&mut arc.store, 0.05).unwrap();
        let after = snapshot(&arc.store);
        let mut moved = 0;
        for (b, a) in before.iter().zip(&after) {
            if b.1 {
                prop_assert_eq!(&b.2, &a.2, "frozen {} moved", &b.0);
            } else if b.2 != a.2 {
                moved += 1;
            }
        }
        prop_assert!(moved > 0);
    }

    #[test]
    fn conv_extent_follows_closed_form(
        n in 1..3usize, ci in 1..4usize, co in 1..4usize,
        h in 1..12usize, w in 1..12usize,
        k in 1..6usize, s in 1..4usize, p in 0..3usize,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64((h * 31 + w) as u64);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::uniform(&[n, ci, h, w], 1.0, &mut rng));
        let wt = tape.leaf(Tensor::uniform(&[co, ci, k, k], 1.0, &mut rng));
        let b = tape.leaf(Tensor::zeros(&[co]));
        let fits = |e: usize| e + 2 * p >= k && (e + 2 * p - k).is_multiple_of(s);
        match tape.conv2d(x, wt, b, s, p) {
            Ok(y) => {
                prop_assert!(fits(h) && fits(w));
                let shape = [n, co, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1];
                prop_assert_eq!(tape.value(y).shape(), &shape[..]);
            }
            Err(_) => prop_assert!(!(fits(h) && fits(w))),
        }
    }

    #[test]
    fn pool_and_linear_shapes(n in 1..4usize, c in 1..6usize, h in 1..8usize, w in 1..8usize, out in 1..6usize) {
        let mut rng = ChaCha8Rng::seed_from_u64((n * 7 + c) as u64);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::uniform(&[n, c, h, w], 1.0, &mut rng));
        let avg = tape.global_avg_pool(x).unwrap();
        let max = tape.global_max_pool(x).unwrap();
        prop_assert_eq!(tape.value(avg).shape(), &[n, c, 1, 1][..]);
        prop_assert_eq!(tape.value(max).shape(), &[n, c, 1, 1][..]);
        let z = tape.reshape(avg, vec![n, c]).unwrap();
        let wt = tape.leaf(Tensor::uniform(&[out, c], 1.0, &mut rng));
        let b = tape.leaf(Tensor::zeros(&[out]));
        let y = tape.linear(z, wt, b).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[n, out][..]);
    }
}

#[test]
fn identical_seeds_give_bit_identical_outputs_and_gradients() {
    let run = || {
        let mut arc = small_arc(42);
        let loss = backprop(&mut arc, &scenes(7));
        (loss.to_bits(), snapshot(&arc.store))
    };
    assert_eq!(run(), run());
}
