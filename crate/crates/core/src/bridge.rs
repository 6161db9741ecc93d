//! Context-guided bridge: channel attention over frozen-branch features,
//! a spatial gate, and an alpha-scaled residual projection into the
//! specialist feature stream.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SPATIAL_KERNEL: usize = 7;
pub const COMPRESS_KERNEL: usize = 1;

/// Nonlinearity between the two layers of the shared MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MlpActivation {
    Relu,
    /// Purely linear MLP; only used to state the gate-ordering property.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BridgeConfig {
    /// Channels of the frozen-branch features.
    pub c_ctx: usize,
    /// Channels of the specialist input features.
    pub c_task: usize,
    pub reduction: usize,
    pub alpha_init: f64,
    pub activation: MlpActivation,
}

impl BridgeConfig {
    pub fn new(c_ctx: usize, c_task: usize) -> Self {
        Self {
            c_ctx,
            c_task,
            reduction: 8,
            alpha_init: 0.0,
            activation: MlpActivation::Relu,
        }
    }

    /// Width of the MLP bottleneck and of the 1x1 compression.
    pub fn hidden(&self) -> usize {
        (self.c_ctx / self.reduction).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_ctx == 0 || self.c_task == 0 || self.reduction == 0 {
            return shape_err(
                "bridge",
                format!(
                    "c_ctx, c_task and reduction must be >= 1 (got {}, {}, {})",
                    self.c_ctx, self.c_task, self.reduction
                ),
            );
        }
        if !self.alpha_init.is_finite() {
            return shape_err("bridge", "alpha_init must be finite");
        }
        Ok(())
    }
}

/// Parameter handles of one bridge. The MLP weights are shared between the
/// average- and max-pooled descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeState {
    pub config: BridgeConfig,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub compress_w: ParamId,
    pub compress_b: ParamId,
    pub spatial_w: ParamId,
    pub spatial_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub alpha: ParamId,
}

pub const BRIDGE_PARAM_NAMES: [&str; 11] = [
    "mlp_w1",
    "mlp_b1",
    "mlp_w2",
    "mlp_b2",
    "compress_w",
    "compress_b",
    "spatial_w",
    "spatial_b",
    "proj_w",
    "proj_b",
    "alpha",
];

impl BridgeState {
    /// Expected shapes of every bridge parameter, in [`BRIDGE_PARAM_NAMES`] order.
    pub fn param_shapes(cfg: &BridgeConfig) -> [Vec<usize>; 11] {
        let (c, t, h, k) = (cfg.c_ctx, cfg.c_task, cfg.hidden(), SPATIAL_KERNEL);
        [
            vec![h, c],
            vec![h],
            vec![c, h],
            vec![c],
            vec![h, c, COMPRESS_KERNEL, COMPRESS_KERNEL],
            vec![h],
            vec![1, h, k, k],
            vec![1],
            vec![t, c, 1, 1],
            vec![t],
            vec![1],
        ]
    }

    /// Register fresh parameters under `prefix` (e.g. `bridge.0.`). Weights
    /// are uniform in `±1/sqrt(fan_in)`, biases zero, alpha `alpha_init`.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BridgeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let shapes = Self::param_shapes(cfg);
        let mut ids = Vec::with_capacity(shapes.len());
        for (name, shape) in BRIDGE_PARAM_NAMES.iter().zip(shapes) {
            let tensor = if *name == "alpha" {
                Tensor::scalar(T::lit(cfg.alpha_init))
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                Tensor::uniform(&shape, 1.0 / (fan_in as f64).sqrt(), rng)
            };
            ids.push(store.insert(format!("{prefix}{name}"), tensor)?);
        }
        Ok(Self::from_ids(cfg.clone(), &ids))
    }

    /// Bind to parameters already present in `store` (e.g. after loading a
    /// checkpoint), checking their shapes.
    pub fn bind<T: Scalar>(store: &ParamStore<T>, prefix: &str, cfg: &BridgeConfig) -> Result<Self> {
        cfg.validate()?;
        let shapes = Self::param_shapes(cfg);
        let mut ids = Vec::with_capacity(shapes.len());
        for (name, shape) in BRIDGE_PARAM_NAMES.iter().zip(shapes) {
            let id = store.id(&format!("{prefix}{name}"))?;
            if store.get(id).tensor.shape() != shape.as_slice() {
                return shape_err(
                    "bridge",
                    format!(
                        "`{prefix}{name}` has shape {:?}, expected {shape:?}",
                        store.get(id).tensor.shape()
                    ),
                );
            }
            ids.push(id);
        }
        Ok(Self::from_ids(cfg.clone(), &ids))
    }

    fn from_ids(config: BridgeConfig, ids: &[ParamId]) -> Self {
        Self {
            config,
            mlp_w1: ids[0],
            mlp_b1: ids[1],
            mlp_w2: ids[2],
            mlp_b2: ids[3],
            compress_w: ids[4],
            compress_b: ids[5],
            spatial_w: ids[6],
            spatial_b: ids[7],
            proj_w: ids[8],
            proj_b: ids[9],
            alpha: ids[10],
        }
    }

    pub fn ids(&self) -> [ParamId; 11] {
        [
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
            self.compress_w,
            self.compress_b,
            self.spatial_w,
            self.spatial_b,
            self.proj_w,
            self.proj_b,
            self.alpha,
        ]
    }

    pub fn alpha<T: Scalar>(&self, store: &ParamStore<T>) -> T {
        store.get(self.alpha).tensor.values()[0]
    }
}

struct Mlp {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    activation: MlpActivation,
}

impl Mlp {
    fn record<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, s: &BridgeState) -> Self {
        Self {
            w1: tape.param(store, s.mlp_w1),
            b1: tape.param(store, s.mlp_b1),
            w2: tape.param(store, s.mlp_w2),
            b2: tape.param(store, s.mlp_b2),
            activation: s.config.activation,
        }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let h = tape.linear(z, self.w1, self.b1)?;
        let h = match self.activation {
            MlpActivation::Relu => tape.relu(h),
            MlpActivation::Identity => h,
        };
        tape.linear(h, self.w2, self.b2)
    }
}

fn check_channels<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    expected: usize,
    op: &'static str,
) -> Result<(usize, usize, usize, usize)> {
    let dims = tape.value(x).dims4(op)?;
    if dims.1 != expected {
        return shape_err(op, format!("expected {expected} channels, got {}", dims.1));
    }
    Ok(dims)
}

/// Returns the channel map `m_c` (`N x C x 1 x 1`, strictly inside (0, 1))
/// and the channel-refined features `m_c * x_ctx`.
pub fn channel_attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    state: &BridgeState,
    x_ctx: Var,
) -> Result<(Var, Var)> {
    let (n, c, _, _) = check_channels(tape, x_ctx, state.config.c_ctx, "channel_attention")?;
    let mlp = Mlp::record(tape, store, state);
    let z_avg = tape.global_avg_pool(x_ctx)?;
    let z_avg = tape.reshape(z_avg, vec![n, c])?;
    let z_max = tape.global_max_pool(x_ctx)?;
    let z_max = tape.reshape(z_max, vec![n, c])?;
    let a = mlp.apply(tape, z_avg)?;
    let b = mlp.apply(tape, z_max)?;
    let pre = tape.add(a, b)?;
    let m_c = tape.sigmoid(pre);
    let m_c = tape.reshape(m_c, vec![n, c, 1, 1])?;
    let refined = tape.mul(x_ctx, m_c)?;
    Ok((m_c, refined))
}

/// Spatial map `m_s` (`N x 1 x H x W`) from a 1x1 compression followed by a
/// 7x7 convolution with padding 3.
pub fn spatial_gate<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    state: &BridgeState,
    x_refined: Var,
) -> Result<Var> {
    check_channels(tape, x_refined, state.config.c_ctx, "spatial_gate")?;
    let cw = tape.param(store, state.compress_w);
    let cb = tape.param(store, state.compress_b);
    let sw = tape.param(store, state.spatial_w);
    let sb = tape.param(store, state.spatial_b);
    let squeezed = tape.conv2d(x_refined, cw, cb, 1, 0)?;
    let logits = tape.conv2d(squeezed, sw, sb, 1, SPATIAL_KERNEL / 2)?;
    Ok(tape.sigmoid(logits))
}

/// `f_in + alpha * proj(m_s * m_c * x_ctx)`.
pub fn bridge_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    state: &BridgeState,
    f_in: Var,
    x_ctx: Var,
) -> Result<Var> {
    let (n, _, h, w) = check_channels(tape, f_in, state.config.c_task, "bridge_forward")?;
    let (cn, _, ch, cw) = check_channels(tape, x_ctx, state.config.c_ctx, "bridge_forward")?;
    if (n, h, w) != (cn, ch, cw) {
        return shape_err(
            "bridge_forward",
            format!("f_in is {n}x_x{h}x{w} but x_ctx is {cn}x_x{ch}x{cw}"),
        );
    }
    let (_, refined) = channel_attention(tape, store, state, x_ctx)?;
    let m_s = spatial_gate(tape, store, state, refined)?;
    let gated = tape.mul(refined, m_s)?;
    let pw = tape.param(store, state.proj_w);
    let pb = tape.param(store, state.proj_b);
    let projected = tape.conv2d(gated, pw, pb, 1, 0)?;
    let alpha = tape.param(store, state.alpha);
    let injected = tape.scale(projected, alpha)?;
    tape.add(f_in, injected)
}
