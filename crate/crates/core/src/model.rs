//! Single-level grid detector and the dual-branch ARC model built from it.
//!
//! Parameter names: `backbone.*` for the shared feature extractor, `head.*`
//! for a plain detector's head, and `context_head.*`, `specialist.<i>.*`,
//! `bridge.<i>.*` for the ARC model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid_scalar, Tape, Var};
use crate::bridge::{bridge_forward, BridgeConfig, BridgeState, MlpActivation};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fusion::{nms, veto_fuse, BBox, Branch, Detection, VetoConfig};
use crate::loss::{HeadTargets, CLASS_OFFSET, OBJ_CHANNEL};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::synth::{batch_tensor, Scene};
use crate::tensor::Tensor;

/// Downsampling convolutions halve the extent exactly: k=4, s=2, p=1.
const DOWN_KERNEL: usize = 4;
const HEAD_KERNEL: usize = 3;
/// Objectness bias at init, `ln(0.01 / 0.99)`.
const OBJ_PRIOR_LOGIT: f64 = -4.59511985013459;
/// Smallest decoded box extent in pixels.
const MIN_DECODED_EXTENT: f64 = 0.5;
const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub in_channels: usize,
    /// One stride-2 stage per entry.
    pub widths: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            in_channels: 3,
            widths: vec![8, 16, 32],
        }
    }
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.stride()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config(format!("invalid backbone widths {:?}", self.widths)));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.stride()) {
            return Err(Error::Config(format!(
                "input size {} is not divisible by the cumulative stride {}",
                self.input_size,
                self.stride()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeGeometry {
    pub stride: f64,
    /// Reference box extent that a zero size logit decodes to.
    pub anchor: f64,
    pub image_size: f64,
}

impl DecodeGeometry {
    pub fn for_backbone(cfg: &BackboneConfig) -> Self {
        let stride = cfg.stride() as f64;
        Self {
            stride,
            anchor: 2.0 * stride,
            image_size: cfg.input_size as f64,
        }
    }
}

fn conv_pair<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: [usize; 4],
    bound: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamId, ParamId)> {
    let w = store.insert(format!("{name}.weight"), Tensor::uniform(&shape, bound, rng))?;
    let b = store.insert(format!("{name}.bias"), Tensor::zeros(&[shape[0]]))?;
    Ok((w, b))
}

fn bind_pair<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<(ParamId, ParamId)> {
    Ok((store.id(&format!("{name}.weight"))?, store.id(&format!("{name}.bias"))?))
}

fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn expect_shape<T: Scalar>(store: &ParamStore<T>, id: ParamId, want: &[usize]) -> Result<()> {
    let p = store.get(id);
    if p.tensor.shape() != want {
        return Err(Error::Checkpoint(format!(
            "`{}` has shape {:?}, expected {want:?}",
            p.name,
            p.tensor.shape()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    stages: Vec<(ParamId, ParamId)>,
    refine: (ParamId, ParamId),
}

impl Backbone {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut cin = config.in_channels;
        for (i, &c) in config.widths.iter().enumerate() {
            let fan_in = cin * DOWN_KERNEL * DOWN_KERNEL;
            stages.push(conv_pair(
                store,
                &format!("backbone.stage{i}"),
                [c, cin, DOWN_KERNEL, DOWN_KERNEL],
                he_bound(fan_in),
                rng,
            )?);
            cin = c;
        }
        let refine = conv_pair(
            store,
            "backbone.refine",
            [cin, cin, HEAD_KERNEL, HEAD_KERNEL],
            he_bound(cin * HEAD_KERNEL * HEAD_KERNEL),
            rng,
        )?;
        Ok(Self { config, stages, refine })
    }

    /// Recover the architecture from stored parameter shapes.
    pub fn bind<T: Scalar>(store: &ParamStore<T>, input_size: usize) -> Result<Self> {
        let mut stages = Vec::new();
        let mut widths = Vec::new();
        let mut in_channels = None;
        while let Ok(pair) = bind_pair(store, &format!("backbone.stage{}", stages.len())) {
            let shape = store.get(pair.0).tensor.shape().to_vec();
            if shape.len() != 4 || shape[2] != DOWN_KERNEL || shape[3] != DOWN_KERNEL {
                return Err(Error::Checkpoint(format!("unexpected backbone stage shape {shape:?}")));
            }
            in_channels.get_or_insert(shape[1]);
            widths.push(shape[0]);
            stages.push(pair);
        }
        let config = BackboneConfig {
            input_size,
            in_channels: in_channels.ok_or_else(|| Error::Checkpoint("no backbone stages".into()))?,
            widths,
        };
        config.validate()?;
        let refine = bind_pair(store, "backbone.refine")?;
        let c = config.out_channels();
        expect_shape(store, refine.0, &[c, c, HEAD_KERNEL, HEAD_KERNEL])?;
        Ok(Self { config, stages, refine })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, images: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(images).dims4("backbone")?;
        let s = self.config.input_size;
        if c != self.config.in_channels || h != s || w != s {
            return Err(Error::Shape {
                op: "backbone",
                detail: format!(
                    "expected N x {} x {s} x {s} images, got channel/extent {c} x {h} x {w}",
                    self.config.in_channels
                ),
            });
        }
        let mut x = images;
        for &(wid, bid) in &self.stages {
            let (wv, bv) = (tape.param(store, wid), tape.param(store, bid));
            let y = tape.conv2d(x, wv, bv, 2, 1)?;
            x = tape.relu(y);
        }
        let (wv, bv) = (tape.param(store, self.refine.0), tape.param(store, self.refine.1));
        let y = tape.conv2d(x, wv, bv, 1, HEAD_KERNEL / 2)?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    pub hidden: usize,
    /// Number of 3x3 conv + ReLU layers before the prediction conv.
    pub depth: usize,
}

impl HeadConfig {
    pub fn outputs(&self) -> usize {
        CLASS_OFFSET + self.num_classes
    }
}

/// `depth` 3x3 conv + ReLU layers followed by a 1x1 prediction conv. Output
/// channels are `[tx, ty, tw, th, obj, classes...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub prefix: String,
    pub config: HeadConfig,
    /// Global class id of each local class channel.
    pub class_ids: Vec<usize>,
    convs: Vec<(ParamId, ParamId)>,
    out: (ParamId, ParamId),
}

impl Head {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: HeadConfig,
        class_ids: Vec<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.num_classes == 0 || class_ids.len() != config.num_classes {
            return Err(Error::Config(format!(
                "head `{prefix}` needs {} class ids, got {}",
                config.num_classes,
                class_ids.len()
            )));
        }
        if config.depth == 0 || config.hidden == 0 {
            return Err(Error::Config(format!("head `{prefix}` needs depth and hidden >= 1")));
        }
        let h = config.hidden;
        let mut convs = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels;
        for i in 0..config.depth {
            convs.push(conv_pair(
                store,
                &format!("{prefix}.conv{i}"),
                [h, cin, HEAD_KERNEL, HEAD_KERNEL],
                he_bound(cin * HEAD_KERNEL * HEAD_KERNEL),
                rng,
            )?);
            cin = h;
        }
        let out = conv_pair(
            store,
            &format!("{prefix}.out"),
            [config.outputs(), h, 1, 1],
            1.0 / (h as f64).sqrt(),
            rng,
        )?;
        store.get_mut(out.1).tensor.values_mut()[OBJ_CHANNEL] = T::lit(OBJ_PRIOR_LOGIT);
        Ok(Self {
            prefix: prefix.to_string(),
            config,
            class_ids,
            convs,
            out,
        })
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, prefix: &str, first_class: usize) -> Result<Self> {
        let mut convs = Vec::new();
        while let Ok(pair) = bind_pair(store, &format!("{prefix}.conv{}", convs.len())) {
            convs.push(pair);
        }
        let Some(&first) = convs.first() else {
            return Err(Error::Checkpoint(format!("head `{prefix}` has no conv layers")));
        };
        let out = bind_pair(store, &format!("{prefix}.out"))?;
        let cs = store.get(first.0).tensor.shape().to_vec();
        let os = store.get(out.0).tensor.shape().to_vec();
        if cs.len() != 4 || os.len() != 4 || os[0] <= CLASS_OFFSET || os[1] != cs[0] {
            return Err(Error::Checkpoint(format!(
                "inconsistent head `{prefix}`: {cs:?} / {os:?}"
            )));
        }
        let config = HeadConfig {
            num_classes: os[0] - CLASS_OFFSET,
            in_channels: cs[1],
            hidden: cs[0],
            depth: convs.len(),
        };
        let mut cin = config.in_channels;
        for &(w, b) in &convs {
            expect_shape(store, w, &[config.hidden, cin, HEAD_KERNEL, HEAD_KERNEL])?;
            expect_shape(store, b, &[config.hidden])?;
            cin = config.hidden;
        }
        expect_shape(store, out.1, &[config.outputs()])?;
        Ok(Self {
            prefix: prefix.to_string(),
            config,
            class_ids: (first_class..first_class + config.num_classes).collect(),
            convs,
            out,
        })
    }

    pub fn num_params(&self) -> usize {
        2 * (self.convs.len() + 1)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let mut y = features;
        for &(w, b) in &self.convs {
            let (wv, bv) = (tape.param(store, w), tape.param(store, b));
            let z = tape.conv2d(y, wv, bv, 1, HEAD_KERNEL / 2)?;
            y = tape.relu(z);
        }
        let (wv, bv) = (tape.param(store, self.out.0), tape.param(store, self.out.1));
        tape.conv2d(y, wv, bv, 1, 0)
    }

    /// Targets for the objects of `scenes` whose class this head owns;
    /// other objects count as background.
    pub fn targets(&self, scenes: &[&Scene], grid: usize, geom: &DecodeGeometry) -> HeadTargets {
        let boxes: Vec<Vec<(usize, [f64; 4])>> = scenes
            .iter()
            .map(|s| {
                s.objects
                    .iter()
                    .filter_map(|o| {
                        let local = self.class_ids.iter().position(|&c| c == o.class_id)?;
                        Some((local, o.bbox.corners()))
                    })
                    .collect()
            })
            .collect();
        HeadTargets::assign(&boxes, (grid, grid), geom.stride, geom.anchor, self.config.num_classes)
    }

    /// Append fresh class channels for `extra` new global class ids, keeping
    /// existing rows.
    pub fn expand_classes<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        extra: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if extra.iter().any(|c| self.class_ids.contains(c)) {
            return Err(Error::Config(format!(
                "class ids {extra:?} overlap {:?}",
                self.class_ids
            )));
        }
        let h = self.config.hidden;
        let old_rows = self.config.outputs();
        let fresh = Tensor::<T>::uniform(&[extra.len(), h, 1, 1], 1.0 / (h as f64).sqrt(), rng);
        let w = &mut store.get_mut(self.out.0).tensor;
        let mut values = w.values().to_vec();
        values.extend_from_slice(fresh.values());
        *w = Tensor::new(vec![old_rows + extra.len(), h, 1, 1], values)?;
        let b = &mut store.get_mut(self.out.1).tensor;
        let mut values = b.values().to_vec();
        values.resize(old_rows + extra.len(), T::zero());
        *b = Tensor::new(vec![old_rows + extra.len()], values)?;
        self.config.num_classes += extra.len();
        self.class_ids.extend_from_slice(extra);
        Ok(())
    }
}

/// Grid decoding of one head's raw output. Per cell: centre
/// `(col + sigma(tx), row + sigma(ty)) * stride`, extent
/// `anchor * exp(t)` clamped to `[0.5, 2 * image_size]`, confidence
/// `sigma(obj) * max_c sigma(cls_c)`. Image ids start at `first_image`.
pub fn decode<T: Scalar>(
    raw: &Tensor<T>,
    geom: &DecodeGeometry,
    conf_threshold: f64,
    class_ids: &[usize],
    branch: Branch,
    first_image: usize,
) -> Result<Vec<Detection>> {
    let (n, ch, h, w) = raw.dims4("decode")?;
    if ch != CLASS_OFFSET + class_ids.len() || class_ids.is_empty() {
        return Err(Error::Shape {
            op: "decode",
            detail: format!("{ch} channels for {} classes", class_ids.len()),
        });
    }
    let v = raw.values();
    let at = |img: usize, c: usize, r: usize, col: usize| v[((img * ch + c) * h + r) * w + col].to_f64_lossy();
    let max_log = (2.0 * geom.image_size / geom.anchor).ln();
    let min_log = (MIN_DECODED_EXTENT / geom.anchor).ln();
    let mut out = Vec::new();
    for img in 0..n {
        for r in 0..h {
            for col in 0..w {
                let obj = sigmoid_scalar(at(img, OBJ_CHANNEL, r, col));
                let (mut best, mut best_p) = (0, f64::NEG_INFINITY);
                for k in 0..class_ids.len() {
                    let p = sigmoid_scalar(at(img, CLASS_OFFSET + k, r, col));
                    if p > best_p {
                        (best, best_p) = (k, p);
                    }
                }
                let confidence = obj * best_p;
                // written negated so that NaN is dropped
                #[allow(clippy::neg_cmp_op_on_partial_ord)]
                if !(confidence >= conf_threshold) {
                    continue;
                }
                let cx = (col as f64 + sigmoid_scalar(at(img, 0, r, col))) * geom.stride;
                let cy = (r as f64 + sigmoid_scalar(at(img, 1, r, col))) * geom.stride;
                let bw = geom.anchor * at(img, 2, r, col).clamp(min_log, max_log).exp();
                let bh = geom.anchor * at(img, 3, r, col).clamp(min_log, max_log).exp();
                let Ok(bbox) = BBox::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0) else {
                    continue;
                };
                out.push(Detection {
                    image_id: first_image + img,
                    bbox,
                    class_id: class_ids[best],
                    confidence,
                    branch,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub max_per_image: usize,
    /// Fuse specialist output through the context veto; `None` keeps both.
    pub veto: Option<VetoConfig>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.01,
            nms_iou: 0.5,
            max_per_image: 100,
            veto: Some(VetoConfig::default()),
        }
    }
}

fn postprocess(dets: Vec<Detection>, cfg: &InferenceConfig) -> Vec<Detection> {
    let mut kept = nms(&dets, cfg.nms_iou);
    // nms output is confidence-ordered, so a stable per-image cap keeps the best
    let mut per_image = std::collections::HashMap::new();
    kept.retain(|d| {
        let n = per_image.entry(d.image_id).or_insert(0usize);
        *n += 1;
        *n <= cfg.max_per_image
    });
    kept
}

/// Backbone plus one head; used for pretraining, fine-tuning and joint
/// training. Class ids are the head's local indices.
#[derive(Clone, Debug)]
pub struct Detector<T: Scalar = f64> {
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub head: Head,
}

impl<T: Scalar> Detector<T> {
    pub fn new(backbone: BackboneConfig, num_classes: usize, head_hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&mut store, backbone, &mut rng)?;
        let cfg = HeadConfig {
            num_classes,
            in_channels: backbone.config.out_channels(),
            hidden: head_hidden,
            depth: 1,
        };
        let head = Head::init(&mut store, "head", cfg, (0..num_classes).collect(), &mut rng)?;
        Ok(Self { store, backbone, head })
    }

    pub fn from_checkpoint(ck: &Checkpoint, input_size: usize) -> Result<Self> {
        let store = ck.to_store()?;
        let backbone = Backbone::bind(&store, input_size)?;
        let head = Head::bind(&store, "head", 0)?;
        if head.config.in_channels != backbone.config.out_channels() {
            return Err(Error::Checkpoint("head input does not match backbone output".into()));
        }
        if store.len() != 2 * (backbone.stages.len() + 1) + head.num_params() {
            return Err(Error::Checkpoint("unexpected entries for a plain detector".into()));
        }
        Ok(Self { store, backbone, head })
    }

    pub fn geometry(&self) -> DecodeGeometry {
        DecodeGeometry::for_backbone(&self.backbone.config)
    }

    pub fn forward(&self, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        let f = self.backbone.forward(tape, &self.store, images)?;
        self.head.forward(tape, &self.store, f)
    }

    pub fn detect(&self, scenes: &[Scene], cfg: &InferenceConfig) -> Result<Vec<Detection>> {
        let geom = self.geometry();
        let mut dets = Vec::new();
        for (chunk_idx, chunk) in scenes.chunks(EVAL_BATCH).enumerate() {
            let refs: Vec<&Scene> = chunk.iter().collect();
            let mut tape = Tape::new();
            let x = tape.constant(batch_tensor(&refs)?);
            let raw = self.forward(&mut tape, x)?;
            dets.extend(decode(
                tape.value(raw),
                &geom,
                cfg.conf_threshold,
                &self.head.class_ids,
                Branch::Context,
                chunk_idx * EVAL_BATCH,
            )?);
        }
        Ok(postprocess(dets, cfg))
    }
}

/// Hyperparameters for turning a pretrained detector into an ARC model.
#[derive(Clone, Debug, PartialEq)]
pub struct ArcConfig {
    pub base_classes: usize,
    /// Class count of each specialist head; ids follow the base classes.
    pub specialist_classes: Vec<usize>,
    /// Hidden width of the pretrained head, and of each specialist head.
    pub head_hidden: usize,
    pub specialist_hidden: usize,
    pub specialist_depth: usize,
    pub reduction: usize,
    pub alpha_init: f64,
}

impl Default for ArcConfig {
    fn default() -> Self {
        Self {
            base_classes: 3,
            specialist_classes: vec![1],
            head_hidden: 32,
            specialist_hidden: 64,
            specialist_depth: 2,
            reduction: 8,
            alpha_init: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Specialist {
    pub head: Head,
    pub bridge: BridgeState,
}

#[derive(Clone, Debug)]
pub struct ArcOutputs {
    pub context: Var,
    pub specialists: Vec<Var>,
}

/// Frozen backbone and context head plus trainable specialist heads fed by
/// bridge-enhanced features.
#[derive(Clone, Debug)]
pub struct ArcModel<T: Scalar = f64> {
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub context: Head,
    pub specialists: Vec<Specialist>,
}

pub const PRESERVED_PREFIXES: [&str; 3] = ["backbone.", "head.", "context_head."];

fn is_preserved(name: &str) -> bool {
    PRESERVED_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Load a pretrained detector checkpoint, copy its head verbatim into a
/// frozen context head, freeze the backbone, and add fresh specialists and
/// bridges with alpha at `alpha_init`.
pub fn build_arc<T: Scalar>(ck: &Checkpoint, input_size: usize, cfg: &ArcConfig, seed: u64) -> Result<ArcModel<T>> {
    let det = Detector::<T>::from_checkpoint(ck, input_size)?;
    if det.head.config.num_classes != cfg.base_classes {
        return Err(Error::Checkpoint(format!(
            "checkpoint head has {} classes, expected {}",
            det.head.config.num_classes, cfg.base_classes
        )));
    }
    let mut store = ParamStore::new();
    for (_, p) in det.store.iter() {
        let name = match p.name.strip_prefix("head.") {
            Some(rest) => format!("context_head.{rest}"),
            None => p.name.clone(),
        };
        let id = store.insert(name, p.tensor.clone())?;
        store.get_mut(id).frozen = true;
    }
    let backbone = Backbone::bind(&store, input_size)?;
    let context = Head::bind(&store, "context_head", 0)?;
    let c = backbone.config.out_channels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specialists = Vec::new();
    let mut next_class = cfg.base_classes;
    for (i, &k) in cfg.specialist_classes.iter().enumerate() {
        let bcfg = BridgeConfig {
            c_ctx: c,
            c_task: c,
            reduction: cfg.reduction,
            alpha_init: cfg.alpha_init,
            activation: MlpActivation::Relu,
        };
        let bridge = BridgeState::init(&mut store, &format!("bridge.{i}."), &bcfg, &mut rng)?;
        let hcfg = HeadConfig {
            num_classes: k,
            in_channels: c,
            hidden: cfg.specialist_hidden,
            depth: cfg.specialist_depth,
        };
        let ids = (next_class..next_class + k).collect();
        let head = Head::init(&mut store, &format!("specialist.{i}"), hcfg, ids, &mut rng)?;
        next_class += k;
        specialists.push(Specialist { head, bridge });
    }
    Ok(ArcModel {
        store,
        backbone,
        context,
        specialists,
    })
}

impl<T: Scalar> ArcModel<T> {
    pub fn from_checkpoint(ck: &Checkpoint, input_size: usize) -> Result<Self> {
        let store: ParamStore<T> = ck.to_store()?;
        let backbone = Backbone::bind(&store, input_size)?;
        let context = Head::bind(&store, "context_head", 0)?;
        let c = backbone.config.out_channels();
        let mut next_class = context.config.num_classes;
        let mut specialists = Vec::new();
        while store
            .by_name(&format!("specialist.{}.out.weight", specialists.len()))
            .is_some()
        {
            let i = specialists.len();
            let head = Head::bind(&store, &format!("specialist.{i}"), next_class)?;
            next_class += head.config.num_classes;
            let hidden = store.id(&format!("bridge.{i}.mlp_w1"))?;
            let h = store.get(hidden).tensor.shape()[0];
            let bcfg = BridgeConfig {
                c_ctx: c,
                c_task: head.config.in_channels,
                reduction: (c / h).max(1),
                alpha_init: 0.0,
                activation: MlpActivation::Relu,
            };
            let bridge = BridgeState::bind(&store, &format!("bridge.{i}."), &bcfg)?;
            specialists.push(Specialist { head, bridge });
        }
        let model = Self {
            store,
            backbone,
            context,
            specialists,
        };
        model.check_frozen_layout()?;
        Ok(model)
    }

    /// Backbone and context head frozen, everything else trainable.
    pub fn check_frozen_layout(&self) -> Result<()> {
        for (_, p) in self.store.iter() {
            let want = is_preserved(&p.name);
            if p.frozen != want {
                return Err(Error::Checkpoint(format!(
                    "`{}` has frozen={} but the ARC layout requires {want}",
                    p.name, p.frozen
                )));
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> DecodeGeometry {
        DecodeGeometry::for_backbone(&self.backbone.config)
    }

    pub fn features(&self, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        self.backbone.forward(tape, &self.store, images)
    }

    /// Specialist `i` on backbone features: the frozen-branch input serves as
    /// both `F_in` and `X_ctx` of the bridge.
    pub fn specialist_forward(&self, tape: &mut Tape<T>, i: usize, features: Var) -> Result<Var> {
        let s = &self.specialists[i];
        let enhanced = bridge_forward(tape, &self.store, &s.bridge, features, features)?;
        s.head.forward(tape, &self.store, enhanced)
    }

    pub fn forward(&self, tape: &mut Tape<T>, images: Var) -> Result<ArcOutputs> {
        let f = self.features(tape, images)?;
        let context = self.context.forward(tape, &self.store, f)?;
        let specialists = (0..self.specialists.len())
            .map(|i| self.specialist_forward(tape, i, f))
            .collect::<Result<_>>()?;
        Ok(ArcOutputs { context, specialists })
    }

    /// Context detections and, per specialist, its own detections; both
    /// after NMS and before fusion.
    pub fn detect_branches(&self, scenes: &[Scene], cfg: &InferenceConfig) -> Result<(Vec<Detection>, Vec<Detection>)> {
        let geom = self.geometry();
        let (mut ctx, mut spec) = (Vec::new(), Vec::new());
        for (chunk_idx, chunk) in scenes.chunks(EVAL_BATCH).enumerate() {
            let refs: Vec<&Scene> = chunk.iter().collect();
            let mut tape = Tape::new();
            let x = tape.constant(batch_tensor(&refs)?);
            let out = self.forward(&mut tape, x)?;
            let first = chunk_idx * EVAL_BATCH;
            ctx.extend(decode(
                tape.value(out.context),
                &geom,
                cfg.conf_threshold,
                &self.context.class_ids,
                Branch::Context,
                first,
            )?);
            for (s, &raw) in self.specialists.iter().zip(&out.specialists) {
                spec.extend(decode(
                    tape.value(raw),
                    &geom,
                    cfg.conf_threshold,
                    &s.head.class_ids,
                    Branch::Specialist,
                    first,
                )?);
            }
        }
        Ok((postprocess(ctx, cfg), postprocess(spec, cfg)))
    }

    pub fn detect(&self, scenes: &[Scene], cfg: &InferenceConfig) -> Result<Vec<Detection>> {
        let (ctx, spec) = self.detect_branches(scenes, cfg)?;
        Ok(match &cfg.veto {
            Some(v) => veto_fuse(&ctx, &spec, v),
            None => ctx.into_iter().chain(spec).collect(),
        })
    }
}

/// Either model kind, as recovered from a checkpoint's entry names.
#[derive(Clone, Debug)]
pub enum Model<T: Scalar = f64> {
    Detector(Detector<T>),
    Arc(ArcModel<T>),
}

impl<T: Scalar> Model<T> {
    pub fn from_checkpoint(ck: &Checkpoint, input_size: usize) -> Result<Self> {
        if ck.entries.iter().any(|e| e.name.starts_with("context_head.")) {
            Ok(Model::Arc(ArcModel::from_checkpoint(ck, input_size)?))
        } else {
            Ok(Model::Detector(Detector::from_checkpoint(ck, input_size)?))
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        match self {
            Model::Detector(d) => &d.store,
            Model::Arc(a) => &a.store,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.store())
    }

    pub fn detect(&self, scenes: &[Scene], cfg: &InferenceConfig) -> Result<Vec<Detection>> {
        match self {
            Model::Detector(d) => d.detect(scenes, cfg),
            Model::Arc(a) => a.detect(scenes, cfg),
        }
    }

    /// Every global class id any head can emit.
    pub fn class_ids(&self) -> Vec<usize> {
        match self {
            Model::Detector(d) => d.head.class_ids.clone(),
            Model::Arc(a) => a
                .context
                .class_ids
                .iter()
                .chain(a.specialists.iter().flat_map(|s| &s.head.class_ids))
                .copied()
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrozenCheck {
    /// Preserved entries (backbone and base head) that are not bit-identical.
    pub differing: Vec<String>,
}

impl FrozenCheck {
    pub fn identical(&self) -> bool {
        self.differing.is_empty()
    }
}

/// Compare the preserved entries of two checkpoints of the same
/// architecture bit for bit.
pub fn verify_frozen(before: &Checkpoint, after: &Checkpoint) -> Result<FrozenCheck> {
    let mut a: Vec<&str> = before.entries.iter().map(|e| e.name.as_str()).collect();
    let mut b: Vec<&str> = after.entries.iter().map(|e| e.name.as_str()).collect();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(Error::Checkpoint("checkpoints have different entry names".into()));
    }
    let differing = before
        .entries
        .iter()
        .filter(|e| is_preserved(&e.name))
        .filter(|e| {
            let other = after.get(&e.name).expect("same name set");
            other.shape != e.shape
                || other.frozen != e.frozen
                || other
                    .values
                    .iter()
                    .map(|v| v.to_bits())
                    .ne(e.values.iter().map(|v| v.to_bits()))
        })
        .map(|e| e.name.clone())
        .collect();
    Ok(FrozenCheck { differing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, ClassMix, SceneSpec};

    fn small_detector(seed: u64) -> Detector<f64> {
        Detector::new(BackboneConfig::default(), 3, 32, seed).unwrap()
    }

    #[test]
    fn backbone_rejects_indivisible_input() {
        let cfg = BackboneConfig {
            input_size: 60,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(BackboneConfig::default().grid(), 8);
    }

    #[test]
    fn zero_raw_output_decodes_to_quarter_confidence() {
        let geom = DecodeGeometry {
            stride: 8.0,
            anchor: 16.0,
            image_size: 64.0,
        };
        let raw = Tensor::<f64>::zeros(&[1, 6, 2, 2]);
        let d = decode(&raw, &geom, 0.0, &[0], Branch::Context, 0).unwrap();
        assert_eq!(d.len(), 4);
        assert!(d.iter().all(|d| d.confidence == 0.25));
        assert!(decode(&raw, &geom, 0.3, &[0], Branch::Context, 0).unwrap().is_empty());
    }

    #[test]
    fn one_hot_cell_decodes_to_hand_computed_box() {
        let geom = DecodeGeometry {
            stride: 8.0,
            anchor: 16.0,
            image_size: 64.0,
        };
        let (h, w, ch) = (4, 4, 7);
        let mut v = vec![-20.0; ch * h * w];
        let set = |v: &mut Vec<f64>, c: usize, val: f64| v[(c * h + 2) * w + 1] = val;
        // cell row 2, col 1: offsets sigma(0)=0.5, width 16*e^ln2 = 32, height 16
        set(&mut v, 0, 0.0);
        set(&mut v, 1, 0.0);
        set(&mut v, 2, 2f64.ln());
        set(&mut v, 3, 0.0);
        set(&mut v, 4, 20.0);
        set(&mut v, 6, 20.0);
        let raw = Tensor::new(vec![1, ch, h, w], v).unwrap();
        let d = decode(&raw, &geom, 0.5, &[3, 4], Branch::Specialist, 7).unwrap();
        assert_eq!(d.len(), 1);
        let [x1, y1, x2, y2] = d[0].bbox.corners();
        assert!((x1 - (12.0 - 16.0)).abs() < 1e-12);
        assert!((x2 - (12.0 + 16.0)).abs() < 1e-12);
        assert!((y1 - 12.0).abs() < 1e-12 && (y2 - 28.0).abs() < 1e-12);
        assert_eq!((d[0].class_id, d[0].image_id), (4, 7));
    }

    #[test]
    fn extreme_logits_stay_within_bounds() {
        let geom = DecodeGeometry {
            stride: 8.0,
            anchor: 16.0,
            image_size: 64.0,
        };
        let mut v = vec![0.0; 6 * 8 * 8];
        for (i, x) in v.iter_mut().enumerate() {
            *x = if i % 3 == 0 { 1e6 } else { -1e6 };
        }
        let raw = Tensor::new(vec![1, 6, 8, 8], v).unwrap();
        for d in decode(&raw, &geom, 0.0, &[0], Branch::Context, 0).unwrap() {
            let [x1, y1, x2, y2] = d.bbox.corners();
            assert!(x1 < x2 && y1 < y2);
            assert!(x1 >= -64.0 && y1 >= -64.0 && x2 <= 128.0 && y2 <= 128.0);
        }
    }

    #[test]
    fn build_arc_freezes_and_preserves_context_outputs() {
        let det = small_detector(3);
        let ck = Checkpoint::from_store(&det.store);
        let arc: ArcModel<f64> = build_arc(&ck, 64, &ArcConfig::default(), 9).unwrap();
        arc.check_frozen_layout().unwrap();
        let frozen = arc.store.iter().filter(|(_, p)| p.frozen).count();
        assert_eq!(frozen, det.store.len());
        assert!(arc
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with("specialist.") || p.name.starts_with("bridge."))
            .all(|(_, p)| !p.frozen));

        let scenes = generate(&SceneSpec::default(), 1, 5, ClassMix::Mixed).unwrap();
        let refs: Vec<&Scene> = scenes.iter().collect();
        let mut t1 = Tape::new();
        let x = t1.constant(batch_tensor(&refs).unwrap());
        let a = det.forward(&mut t1, x).unwrap();
        let mut t2 = Tape::new();
        let x = t2.constant(batch_tensor(&refs).unwrap());
        let out = arc.forward(&mut t2, x).unwrap();
        assert_eq!(t1.value(a).values(), t2.value(out.context).values());
        assert_eq!(t2.value(out.specialists[0]).shape(), &[5, 6, 8, 8]);

        let again: ArcModel<f64> = build_arc(&ck, 64, &ArcConfig::default(), 9).unwrap();
        assert_eq!(Checkpoint::from_store(&again.store), Checkpoint::from_store(&arc.store));
    }

    #[test]
    fn build_arc_rejects_class_count_mismatch() {
        let ck = Checkpoint::from_store(&small_detector(1).store);
        let cfg = ArcConfig {
            base_classes: 4,
            ..Default::default()
        };
        assert!(build_arc::<f64>(&ck, 64, &cfg, 0).is_err());
    }

    #[test]
    fn specialist_loss_has_no_gradient_path_to_frozen_params() {
        let det = small_detector(2);
        let arc: ArcModel<f64> = build_arc(&Checkpoint::from_store(&det.store), 64, &ArcConfig::default(), 1).unwrap();
        let scenes = generate(&SceneSpec::default(), 1, 2, ClassMix::TaskOnly).unwrap();
        let refs: Vec<&Scene> = scenes.iter().collect();
        let mut tape = Tape::new();
        let x = tape.constant(batch_tensor(&refs).unwrap());
        let f = arc.features(&mut tape, x).unwrap();
        assert!(!tape.requires_grad(f));
        let raw = arc.specialist_forward(&mut tape, 0, f).unwrap();
        let loss = tape.sum(raw);
        let mut store = arc.store.clone();
        tape.backward_into(loss, &mut store).unwrap();
        for (_, p) in store.iter() {
            assert_eq!(p.tensor.grad.is_some(), !p.frozen, "{}", p.name);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_kind_detection() {
        let det = small_detector(4);
        let ck = Checkpoint::from_store(&det.store);
        assert!(matches!(
            Model::<f64>::from_checkpoint(&ck, 64).unwrap(),
            Model::Detector(_)
        ));
        let arc: ArcModel<f64> = build_arc(&ck, 64, &ArcConfig::default(), 1).unwrap();
        let ack = Checkpoint::from_store(&arc.store);
        let back = Model::<f64>::from_checkpoint(&Checkpoint::from_bytes(&ack.to_bytes()).unwrap(), 64).unwrap();
        assert_eq!(back.checkpoint(), ack);
        assert_eq!(back.class_ids(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn verify_frozen_reflexive_and_detects_change() {
        let det = small_detector(5);
        let ck = Checkpoint::from_store(&det.store);
        assert!(verify_frozen(&ck, &ck).unwrap().identical());
        let mut changed = ck.clone();
        changed.entries[0].values[0] += 1e-9;
        let r = verify_frozen(&ck, &changed).unwrap();
        assert_eq!(r.differing, vec![ck.entries[0].name.clone()]);
        let mut renamed = ck.clone();
        renamed.entries[0].name = "other".into();
        assert!(verify_frozen(&ck, &renamed).is_err());
    }

    #[test]
    fn expand_keeps_old_rows() {
        let mut det = small_detector(6);
        let before = det.store.by_name("head.out.weight").unwrap().tensor.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        det.head.expand_classes(&mut det.store, &[3], &mut rng).unwrap();
        let after = &det.store.by_name("head.out.weight").unwrap().tensor;
        assert_eq!(after.shape(), &[9, 32, 1, 1]);
        assert_eq!(&after.values()[..before.numel()], before.values());
        assert_eq!(det.head.class_ids, vec![0, 1, 2, 3]);
        assert!(det.head.expand_classes(&mut det.store, &[3], &mut rng).is_err());
    }
}
