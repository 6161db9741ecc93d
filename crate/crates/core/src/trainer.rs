//! SGD with momentum, weight decay and linear warm-up, and the training
//! loops for pretraining and the three adaptation modes.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fusion::VetoConfig;
use crate::loss::{detection_loss, LossParts, LossWeights};
use crate::model::{build_arc, ArcConfig, ArcModel, BackboneConfig, Detector, InferenceConfig, Model};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::synth::{batch_tensor, Scene, BASE_CLASSES, TASK_CLASSES};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.937,
            weight_decay: 0.0005,
            warmup_epochs: 3,
            epochs: 30,
            batch_size: 8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lr) || !finite_nonneg(self.momentum) || !finite_nonneg(self.weight_decay) {
            return Err(Error::Config(
                "lr, momentum and weight_decay must be finite and >= 0".into(),
            ));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// `lr * (epoch + 1) / warmup_epochs` during warm-up, `lr` afterwards.
pub fn lr_schedule(epoch: usize, cfg: &OptimConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        cfg.lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64
    } else {
        cfg.lr
    }
}

/// Momentum buffers exist only for parameters that were trainable when the
/// optimizer was created.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar = f64> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<T>>>,
    pub steps: u64,
    pub lr: f64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, cfg: &OptimConfig) -> Self {
        Self {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: store
                .iter()
                .map(|(_, p)| (!p.frozen).then(|| vec![T::zero(); p.tensor.numel()]))
                .collect(),
            steps: 0,
            lr: 0.0,
        }
    }

    pub fn num_buffers(&self) -> usize {
        self.velocity.iter().flatten().count()
    }

    /// `v = momentum * v + grad + weight_decay * p; p -= lr * v`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.velocity.len() != store.len() {
            return Err(Error::Config("parameter set changed since optimizer creation".into()));
        }
        for (_, p) in store.iter() {
            if !p.frozen && p.tensor.grad.is_none() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
        let (m, wd, lr_t) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for ((_, p), v) in store.iter_mut().zip(&mut self.velocity) {
            let Some(v) = v else { continue };
            if p.frozen {
                continue;
            }
            let grad = p.tensor.grad.take().expect("checked above");
            let values = p.tensor.values_mut();
            for ((x, vi), g) in values.iter_mut().zip(v.iter_mut()).zip(grad) {
                *vi = m * *vi + g + wd * *x;
                *x -= lr_t * *vi;
            }
        }
        self.steps += 1;
        self.lr = lr;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdaptMode {
    FineTune,
    Joint,
    Arc,
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaptMode::FineTune => "finetune",
            AdaptMode::Joint => "joint",
            AdaptMode::Arc => "arc",
        })
    }
}

impl FromStr for AdaptMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(AdaptMode::FineTune),
            "joint" => Ok(AdaptMode::Joint),
            "arc" => Ok(AdaptMode::Arc),
            other => Err(Error::Config(format!("unknown mode `{other}` (finetune|joint|arc)"))),
        }
    }
}

/// Every knob of the experiment, readable from a flat `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub optim: OptimConfig,
    pub pretrain_epochs: usize,
    pub loss: LossWeights,
    /// Scenes generated per stream before the 80/10/10 split.
    pub base_scenes: usize,
    pub task_scenes: usize,
    pub mixed_scenes: usize,
    /// Pretraining counts as converged at or above this base mAP@0.5.
    pub map_floor: f64,
    pub inference: InferenceConfig,
    pub arc: ArcConfig,
    pub backbone: BackboneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            pretrain_epochs: 30,
            loss: LossWeights::default(),
            base_scenes: 2000,
            task_scenes: 1000,
            mixed_scenes: 200,
            map_floor: 0.80,
            inference: InferenceConfig::default(),
            arc: ArcConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

fn parse_value<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 26] = [
        "lr",
        "momentum",
        "weight_decay",
        "warmup_epochs",
        "epochs",
        "batch_size",
        "pretrain_epochs",
        "loss_obj",
        "loss_cls",
        "loss_box",
        "base_scenes",
        "task_scenes",
        "mixed_scenes",
        "map_floor",
        "eval_conf",
        "nms_iou",
        "max_per_image",
        "veto_iou",
        "veto_conf",
        "veto",
        "head_hidden",
        "specialist_hidden",
        "specialist_depth",
        "reduction",
        "alpha_init",
        "widths",
    ];

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let raw = raw.trim();
        match key {
            "lr" => self.optim.lr = parse_value(key, raw)?,
            "momentum" => self.optim.momentum = parse_value(key, raw)?,
            "weight_decay" => self.optim.weight_decay = parse_value(key, raw)?,
            "warmup_epochs" => self.optim.warmup_epochs = parse_value(key, raw)?,
            "epochs" => self.optim.epochs = parse_value(key, raw)?,
            "batch_size" => self.optim.batch_size = parse_value(key, raw)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_value(key, raw)?,
            "loss_obj" => self.loss.obj = parse_value(key, raw)?,
            "loss_cls" => self.loss.cls = parse_value(key, raw)?,
            "loss_box" => self.loss.boxes = parse_value(key, raw)?,
            "base_scenes" => self.base_scenes = parse_value(key, raw)?,
            "task_scenes" => self.task_scenes = parse_value(key, raw)?,
            "mixed_scenes" => self.mixed_scenes = parse_value(key, raw)?,
            "map_floor" => self.map_floor = parse_value(key, raw)?,
            "eval_conf" => self.inference.conf_threshold = parse_value(key, raw)?,
            "nms_iou" => self.inference.nms_iou = parse_value(key, raw)?,
            "max_per_image" => self.inference.max_per_image = parse_value(key, raw)?,
            "veto" => {
                self.inference.veto = match raw {
                    "on" => Some(self.inference.veto.unwrap_or_default()),
                    "off" => None,
                    _ => return Err(Error::Config(format!("`veto`: expected on|off, got `{raw}`"))),
                }
            }
            "veto_iou" | "veto_conf" => {
                let v = self.inference.veto.get_or_insert_with(VetoConfig::default);
                if key == "veto_iou" {
                    v.iou_threshold = parse_value(key, raw)?;
                } else {
                    v.context_confidence_floor = parse_value(key, raw)?;
                }
            }
            "head_hidden" => self.arc.head_hidden = parse_value(key, raw)?,
            "specialist_hidden" => self.arc.specialist_hidden = parse_value(key, raw)?,
            "specialist_depth" => self.arc.specialist_depth = parse_value(key, raw)?,
            "reduction" => self.arc.reduction = parse_value(key, raw)?,
            "alpha_init" => self.arc.alpha_init = parse_value(key, raw)?,
            "widths" => {
                self.backbone.widths = raw
                    .split(',')
                    .map(|w| parse_value(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.backbone.validate()?;
        if self.base_scenes < 10 || self.task_scenes < 10 || self.mixed_scenes < 10 {
            return Err(Error::Config(
                "scene counts must be >= 10 for the 80/10/10 split".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.inference.conf_threshold) || !(0.0..=1.0).contains(&self.map_floor) {
            return Err(Error::Config("eval_conf and map_floor must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// The file format read by [`ExperimentConfig::parse`].
    pub fn render(&self) -> String {
        let veto = self.inference.veto;
        let v = veto.unwrap_or_default();
        let widths: Vec<String> = self.backbone.widths.iter().map(|w| w.to_string()).collect();
        let values = [
            self.optim.lr.to_string(),
            self.optim.momentum.to_string(),
            self.optim.weight_decay.to_string(),
            self.optim.warmup_epochs.to_string(),
            self.optim.epochs.to_string(),
            self.optim.batch_size.to_string(),
            self.pretrain_epochs.to_string(),
            self.loss.obj.to_string(),
            self.loss.cls.to_string(),
            self.loss.boxes.to_string(),
            self.base_scenes.to_string(),
            self.task_scenes.to_string(),
            self.mixed_scenes.to_string(),
            self.map_floor.to_string(),
            self.inference.conf_threshold.to_string(),
            self.inference.nms_iou.to_string(),
            self.inference.max_per_image.to_string(),
            v.iou_threshold.to_string(),
            v.context_confidence_floor.to_string(),
            if veto.is_some() { "on" } else { "off" }.to_string(),
            self.arc.head_hidden.to_string(),
            self.arc.specialist_hidden.to_string(),
            self.arc.specialist_depth.to_string(),
            self.arc.reduction.to_string(),
            self.arc.alpha_init.to_string(),
            widths.join(","),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Batch means of the unweighted loss terms.
    pub loss: LossParts,
    pub total: f64,
}

pub fn write_log<W: Write>(w: W, log: &[EpochLog]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.into());
    wr.write_record(["epoch", "lr", "loss_total", "loss_obj", "loss_cls", "loss_box"])
        .map_err(io)?;
    for e in log {
        wr.write_record([
            e.epoch.to_string(),
            format!("{:.8}", e.lr),
            format!("{:.8}", e.total),
            format!("{:.8}", e.loss.obj),
            format!("{:.8}", e.loss.cls),
            format!("{:.8}", e.loss.boxes),
        ])
        .map_err(io)?;
    }
    wr.flush()?;
    Ok(())
}

fn batch_seed(shuffle_seed: u64, epoch: usize, batch: usize) -> u64 {
    shuffle_seed ^ ((epoch as u64) << 32 | batch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Shared epoch/batch loop. `step` computes the loss on one batch, fills
/// gradients into the store and returns the loss terms.
fn run_epochs<T, F>(
    store: &mut ParamStore<T>,
    count: usize,
    optim: &OptimConfig,
    shuffle_seed: u64,
    weights: &LossWeights,
    mut step: F,
) -> Result<Vec<EpochLog>>
where
    T: Scalar,
    F: FnMut(&mut ParamStore<T>, &[usize]) -> Result<LossParts>,
{
    optim.validate()?;
    let mut sgd = Sgd::new(store, optim);
    let mut order: Vec<usize> = (0..count).collect();
    let mut log = Vec::with_capacity(optim.epochs);
    for epoch in 0..optim.epochs {
        let lr = lr_schedule(epoch, optim);
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        let mut batches = 0usize;
        for (b, idx) in order.chunks(optim.batch_size).enumerate() {
            store.zero_grad();
            let parts = step(store, idx)?;
            let total = weights.obj * parts.obj + weights.cls * parts.cls + weights.boxes * parts.boxes;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    batch_seed: batch_seed(shuffle_seed, epoch, b),
                });
            }
            sgd.step(store, lr)?;
            sum.obj += parts.obj;
            sum.cls += parts.cls;
            sum.boxes += parts.boxes;
            batches += 1;
        }
        let k = batches.max(1) as f64;
        let loss = LossParts {
            obj: sum.obj / k,
            cls: sum.cls / k,
            boxes: sum.boxes / k,
        };
        log.push(EpochLog {
            epoch,
            lr,
            loss,
            total: weights.obj * loss.obj + weights.cls * loss.cls + weights.boxes * loss.boxes,
        });
    }
    Ok(log)
}

/// Train every non-frozen parameter of a plain detector on `data`.
pub fn train_detector<T: Scalar>(
    det: &mut Detector<T>,
    data: &[Scene],
    optim: &OptimConfig,
    weights: &LossWeights,
    shuffle_seed: u64,
) -> Result<Vec<EpochLog>> {
    let geom = det.geometry();
    let grid = det.backbone.config.grid();
    let (backbone, head) = (det.backbone.clone(), det.head.clone());
    run_epochs(
        &mut det.store,
        data.len(),
        optim,
        shuffle_seed,
        weights,
        |store, idx| {
            let scenes: Vec<&Scene> = idx.iter().map(|&i| &data[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(batch_tensor(&scenes)?);
            let f = backbone.forward(&mut tape, store, x)?;
            let raw = head.forward(&mut tape, store, f)?;
            let targets = head.targets(&scenes, grid, &geom);
            let (loss, parts) = detection_loss(&mut tape, raw, &targets, weights)?;
            tape.backward_into(loss, store)?;
            Ok(parts)
        },
    )
}

/// Train the specialists and bridges of an ARC model. The backbone is
/// frozen, so its features are computed once per scene.
pub fn train_arc<T: Scalar>(
    arc: &mut ArcModel<T>,
    data: &[Scene],
    optim: &OptimConfig,
    weights: &LossWeights,
    shuffle_seed: u64,
) -> Result<Vec<EpochLog>> {
    arc.check_frozen_layout()?;
    let geom = arc.geometry();
    let grid = arc.backbone.config.grid();
    let mut features: Vec<Tensor<T>> = Vec::with_capacity(data.len());
    for chunk in data.chunks(32) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let mut tape = Tape::new();
        let x = tape.constant(batch_tensor(&refs)?);
        let f = arc.features(&mut tape, x)?;
        for i in 0..chunk.len() {
            features.push(tape.value(f).batch_slice(i, 1)?);
        }
    }
    let model = arc.clone();
    run_epochs(
        &mut arc.store,
        data.len(),
        optim,
        shuffle_seed,
        weights,
        |store, idx| {
            let scenes: Vec<&Scene> = idx.iter().map(|&i| &data[i]).collect();
            let parts_f: Vec<&Tensor<T>> = idx.iter().map(|&i| &features[i]).collect();
            let mut tape = Tape::new();
            let f = tape.constant(Tensor::stack(&parts_f)?);
            let mut total = LossParts::default();
            let mut loss_vars = Vec::new();
            for s in &model.specialists {
                let enhanced = crate::bridge::bridge_forward(&mut tape, store, &s.bridge, f, f)?;
                let raw = s.head.forward(&mut tape, store, enhanced)?;
                let targets = s.head.targets(&scenes, grid, &geom);
                let (loss, parts) = detection_loss(&mut tape, raw, &targets, weights)?;
                loss_vars.push(loss);
                total.obj += parts.obj;
                total.cls += parts.cls;
                total.boxes += parts.boxes;
            }
            let mut loss = loss_vars[0];
            for &l in &loss_vars[1..] {
                loss = tape.add(loss, l)?;
            }
            tape.backward_into(loss, store)?;
            Ok(total)
        },
    )
}

/// Stream seeds derived from one experiment seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub shuffle: u64,
}

impl Seeds {
    pub fn from_master(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            data: rng.next_u64(),
            init: rng.next_u64(),
            shuffle: rng.next_u64(),
        }
    }
}

pub struct Trained<T: Scalar> {
    pub model: Model<T>,
    pub log: Vec<EpochLog>,
}

pub fn pretrain_base<T: Scalar>(cfg: &ExperimentConfig, base_train: &[Scene], seeds: Seeds) -> Result<Trained<T>> {
    let mut det = Detector::new(
        cfg.backbone.clone(),
        BASE_CLASSES.len(),
        cfg.arc.head_hidden,
        seeds.init,
    )?;
    let optim = OptimConfig {
        epochs: cfg.pretrain_epochs,
        ..cfg.optim.clone()
    };
    let log = train_detector(&mut det, base_train, &optim, &cfg.loss, seeds.shuffle)?;
    Ok(Trained {
        model: Model::Detector(det),
        log,
    })
}

/// Adapt a pretrained base checkpoint to the task classes.
pub fn adapt<T: Scalar>(
    base: &Checkpoint,
    mode: AdaptMode,
    base_train: &[Scene],
    task_train: &[Scene],
    cfg: &ExperimentConfig,
    seeds: Seeds,
) -> Result<Trained<T>> {
    let size = cfg.backbone.input_size;
    match mode {
        AdaptMode::FineTune | AdaptMode::Joint => {
            let mut det = Detector::<T>::from_checkpoint(base, size)?;
            for (_, p) in det.store.iter_mut() {
                p.frozen = false;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seeds.init);
            det.head.expand_classes(&mut det.store, &TASK_CLASSES, &mut rng)?;
            let data: Vec<Scene> = if mode == AdaptMode::Joint {
                base_train.iter().chain(task_train).cloned().collect()
            } else {
                task_train.to_vec()
            };
            let log = train_detector(&mut det, &data, &cfg.optim, &cfg.loss, seeds.shuffle)?;
            Ok(Trained {
                model: Model::Detector(det),
                log,
            })
        }
        AdaptMode::Arc => {
            let mut arc = build_arc::<T>(base, size, &cfg.arc, seeds.init)?;
            let log = train_arc(&mut arc, task_train, &cfg.optim, &cfg.loss, seeds.shuffle)?;
            Ok(Trained {
                model: Model::Arc(arc),
                log,
            })
        }
    }
}
