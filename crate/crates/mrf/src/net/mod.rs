//! Residual 1-D convolutional network with nonlocal attention for mapping
//! signature time courses to tissue parameters, trained from scratch with
//! reverse-mode gradients and Adam.

mod layers;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, ArrayD, IxDyn};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dict::Dictionary;
use crate::error::{Error, Result};
use crate::persist::{self, Tensor};

use layers::{
    conv1d_backward, conv1d_forward, gap_backward, gap_forward, linear_backward, linear_forward,
    maxpool2_backward, maxpool2_forward, proj_backward, proj_forward, relu_backward, relu_forward,
    softmax_rows, softmax_rows_backward, ConvShape,
};

/// Channel count never grows beyond this, however many blocks are stacked.
pub const CHANNEL_CAP: usize = 128;

/// Network outputs: one value each for T1 and T2.
pub const OUTPUT_DIM: usize = 2;

const CHECKPOINT_MAGIC: [u8; 4] = *b"HYC1";
const GRAD_CHUNK: usize = 4;

/// How a complex signature is presented to the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Per-element magnitude, one channel.
    #[default]
    Magnitude,
    /// Real part only, one channel.
    Real,
    /// Real and imaginary parts as two channels.
    RealImag,
}

impl InputMode {
    /// Number of input channels this mode produces.
    pub fn channels(&self) -> usize {
        match self {
            InputMode::Magnitude | InputMode::Real => 1,
            InputMode::RealImag => 2,
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InputMode::Magnitude => "mag",
            InputMode::Real => "real",
            InputMode::RealImag => "realimag2ch",
        };
        write!(f, "{s}")
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mag" => Ok(InputMode::Magnitude),
            "real" => Ok(InputMode::Real),
            "realimag2ch" => Ok(InputMode::RealImag),
            other => Err(Error::parameter(format!(
                "net: unknown input mode {other:?}, expected mag, real, or realimag2ch"
            ))),
        }
    }
}

/// Architecture hyperparameters; fully determines the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_length: usize,
    pub base_channels: usize,
    pub n_blocks: usize,
    pub kernel_size: usize,
    pub nonlocal_enabled: bool,
    pub maxnorm_c: f64,
    pub target_scale: (f64, f64),
    pub input_mode: InputMode,
}

impl NetConfig {
    /// Default architecture for signatures of the given length.
    pub fn new(input_length: usize) -> Self {
        NetConfig {
            input_length,
            base_channels: 16,
            n_blocks: 4,
            kernel_size: 21,
            nonlocal_enabled: true,
            maxnorm_c: 2.0,
            target_scale: (5000.0, 2000.0),
            input_mode: InputMode::Magnitude,
        }
    }

    /// Checks every architectural invariant.
    pub fn validate(&self) -> Result<()> {
        if self.input_length == 0 {
            return Err(Error::parameter("net: input_length must be at least 1"));
        }
        if self.base_channels < 2 {
            return Err(Error::parameter("net: base_channels must be at least 2"));
        }
        if self.nonlocal_enabled && self.base_channels % 2 != 0 {
            return Err(Error::parameter(
                "net: base_channels must be even when nonlocal blocks are enabled",
            ));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::parameter(format!(
                "net: kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.n_blocks == 0 || self.n_blocks >= 32 {
            return Err(Error::parameter(format!(
                "net: n_blocks must be in [1, 31], got {}",
                self.n_blocks
            )));
        }
        if self.input_length >> self.n_blocks == 0 {
            return Err(Error::parameter(format!(
                "net: input_length {} halves to zero after {} pooling stages",
                self.input_length, self.n_blocks
            )));
        }
        if !self.maxnorm_c.is_finite() || self.maxnorm_c <= 0.0 {
            return Err(Error::parameter("net: maxnorm_c must be positive and finite"));
        }
        for s in [self.target_scale.0, self.target_scale.1] {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::parameter(
                    "net: target_scale entries must be positive and finite",
                ));
            }
        }
        Ok(())
    }

    /// Output channel count of each residual block, doubling up to the cap.
    pub fn channel_plan(&self) -> Vec<usize> {
        (0..self.n_blocks)
            .map(|b| {
                self.base_channels
                    .checked_shl(b as u32)
                    .map_or(CHANNEL_CAP, |c| c.min(CHANNEL_CAP))
            })
            .collect()
    }
}

/// Optimizer and schedule settings for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub lr_floor: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 256,
            initial_lr: 1e-2,
            lr_decay: 0.1,
            lr_decay_every: 10,
            lr_floor: 1e-6,
            validation_fraction: 0.2,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Checks optimizer invariants.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::parameter("net: batch_size must be at least 1"));
        }
        if !self.initial_lr.is_finite() || self.initial_lr < 0.0 {
            return Err(Error::parameter("net: initial_lr must be finite and >= 0"));
        }
        if !self.lr_decay.is_finite() || self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(Error::parameter("net: lr_decay must be in (0, 1]"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::parameter("net: lr_decay_every must be at least 1"));
        }
        if !self.lr_floor.is_finite() || self.lr_floor < 0.0 {
            return Err(Error::parameter("net: lr_floor must be finite and >= 0"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::parameter(
                "net: validation_fraction must lie strictly between 0 and 1",
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !b.is_finite() || !(0.0..1.0).contains(&b) {
                return Err(Error::parameter(format!("net: {name} must be in [0, 1)")));
            }
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::parameter("net: epsilon must be positive"));
        }
        Ok(())
    }

    /// Stepped decay schedule with a floor.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let stages = (epoch / self.lr_decay_every) as f64;
        (self.initial_lr * self.lr_decay.powf(stages)).max(self.lr_floor)
    }
}

/// Name, flat offset, length, and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSlot {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvSlot {
    w: usize,
    b: usize,
    shape: ConvShape,
}

impl ConvSlot {
    fn w_slice<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.shape.weight_len()]
    }

    fn b_slice<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.shape.out_ch]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ProjSlot {
    w: usize,
    b: usize,
    out_ch: usize,
    in_ch: usize,
}

impl ProjSlot {
    fn w_slice<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.out_ch * self.in_ch]
    }

    fn b_slice<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.out_ch]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct NlSlots {
    theta: ProjSlot,
    phi: ProjSlot,
    g: ProjSlot,
    out: ProjSlot,
    embed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BlockSlots {
    conv_a: ConvSlot,
    conv_b: ConvSlot,
    shortcut: Option<ProjSlot>,
    nl: Option<NlSlots>,
    c_in: usize,
    c_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct ModelLayout {
    slots: Vec<LayerSlot>,
    stem1: ConvSlot,
    stem2: ConvSlot,
    blocks: Vec<BlockSlots>,
    fc_w: usize,
    fc_b: usize,
    c_last: usize,
    total: usize,
}

struct LayoutBuilder {
    slots: Vec<LayerSlot>,
    cursor: usize,
}

impl LayoutBuilder {
    fn new() -> Self {
        LayoutBuilder {
            slots: Vec::new(),
            cursor: 0,
        }
    }

    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let len: usize = shape.iter().product();
        let offset = self.cursor;
        self.slots.push(LayerSlot {
            name,
            offset,
            len,
            shape,
        });
        self.cursor += len;
        offset
    }

    fn conv(&mut self, name: &str, out_ch: usize, in_ch: usize, kernel: usize) -> ConvSlot {
        let w = self.push(format!("{name}.weight"), vec![out_ch, in_ch, kernel]);
        let b = self.push(format!("{name}.bias"), vec![out_ch]);
        ConvSlot {
            w,
            b,
            shape: ConvShape {
                out_ch,
                in_ch,
                kernel,
            },
        }
    }

    fn proj(&mut self, name: &str, out_ch: usize, in_ch: usize) -> ProjSlot {
        let w = self.push(format!("{name}.weight"), vec![out_ch, in_ch]);
        let b = self.push(format!("{name}.bias"), vec![out_ch]);
        ProjSlot {
            w,
            b,
            out_ch,
            in_ch,
        }
    }
}

fn build_layout(config: &NetConfig) -> ModelLayout {
    let mut lb = LayoutBuilder::new();
    let c0 = config.input_mode.channels();
    let base = config.base_channels;
    let k = config.kernel_size;
    let stem1 = lb.conv("stem.conv1", base, c0, k);
    let stem2 = lb.conv("stem.conv2", base, base, k);
    let plan = config.channel_plan();
    let mut blocks = Vec::with_capacity(config.n_blocks);
    let mut c_in = base;
    for (b, &c_out) in plan.iter().enumerate() {
        let prefix = format!("block{b}");
        let conv_a = lb.conv(&format!("{prefix}.conv_a"), c_in, c_in, k);
        let conv_b = lb.conv(&format!("{prefix}.conv_b"), c_out, c_in, k);
        let shortcut = (c_in != c_out).then(|| lb.proj(&format!("{prefix}.shortcut"), c_out, c_in));
        let nl = config.nonlocal_enabled.then(|| {
            let embed = c_out / 2;
            NlSlots {
                theta: lb.proj(&format!("{prefix}.nl.theta"), embed, c_out),
                phi: lb.proj(&format!("{prefix}.nl.phi"), embed, c_out),
                g: lb.proj(&format!("{prefix}.nl.g"), embed, c_out),
                out: lb.proj(&format!("{prefix}.nl.out"), c_out, embed),
                embed,
            }
        });
        blocks.push(BlockSlots {
            conv_a,
            conv_b,
            shortcut,
            nl,
            c_in,
            c_out,
        });
        c_in = c_out;
    }
    let fc_w = lb.push("head.fc.weight".to_string(), vec![OUTPUT_DIM, c_in]);
    let fc_b = lb.push("head.fc.bias".to_string(), vec![OUTPUT_DIM]);
    let total = lb.cursor;
    ModelLayout {
        slots: lb.slots,
        stem1,
        stem2,
        blocks,
        fc_w,
        fc_b,
        c_last: c_in,
        total,
    }
}

/// Loss and learning-rate record for one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub seconds: f64,
}

/// The network: architecture, flat parameters, and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetConfig,
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub adam_t: u64,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    layout: ModelLayout,
}

impl Model {
    /// Total number of trainable parameters.
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Parameter tensor metadata in storage order.
    pub fn slots(&self) -> &[LayerSlot] {
        &self.layout.slots
    }

    /// Largest Euclidean filter norm per weight tensor, `(name, norm)`.
    pub fn filter_norm_report(&self) -> Vec<(String, f64)> {
        self.layout
            .slots
            .iter()
            .filter(|s| s.shape.len() >= 2)
            .map(|s| {
                let rows = s.shape[0];
                let row_len = s.len / rows;
                let mut worst = 0.0f64;
                for r in 0..rows {
                    let row = &self.params[s.offset + r * row_len..s.offset + (r + 1) * row_len];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    worst = worst.max(norm);
                }
                (s.name.clone(), worst)
            })
            .collect()
    }

    /// Largest Euclidean filter norm across all weight tensors.
    pub fn max_filter_norm(&self) -> f64 {
        self.filter_norm_report()
            .into_iter()
            .fold(0.0, |acc, (_, n)| acc.max(n))
    }
}

/// Builds a model with He-normal weights and zero biases, deterministically per seed.
pub fn build(config: &NetConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let layout = build_layout(config);
    let mut params = vec![0.0; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for slot in &layout.slots {
        if slot.shape.len() < 2 {
            continue;
        }
        let fan_in: usize = slot.shape[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::numerical(format!("net: init distribution: {e}")))?;
        for v in &mut params[slot.offset..slot.offset + slot.len] {
            *v = normal.sample(&mut rng);
        }
    }
    let total = layout.total;
    Ok(Model {
        config: config.clone(),
        params,
        adam_m: vec![0.0; total],
        adam_v: vec![0.0; total],
        adam_t: 0,
        epoch: 0,
        history: Vec::new(),
        layout,
    })
}

struct NlTrace {
    theta: Array2<f64>,
    phi: Array2<f64>,
    g: Array2<f64>,
    attention: Array2<f64>,
    y_att: Array2<f64>,
}

struct BlockTrace {
    t_in_len: usize,
    pooled: Array2<f64>,
    pool_src: Array2<usize>,
    conv_a_pre: Array2<f64>,
    conv_a_out: Array2<f64>,
    sum_pre: Array2<f64>,
    relu_out: Array2<f64>,
    nl: Option<NlTrace>,
}

struct SampleTrace {
    x0: Array2<f64>,
    stem1_pre: Array2<f64>,
    stem1_out: Array2<f64>,
    stem2_pre: Array2<f64>,
    blocks: Vec<BlockTrace>,
    t_last: usize,
    feat: Vec<f64>,
    pred: [f64; 2],
}

fn forward_traced(model: &Model, row: &[f64]) -> SampleTrace {
    let cfg = &model.config;
    let lay = &model.layout;
    let p = &model.params;
    let c0 = cfg.input_mode.channels();
    debug_assert_eq!(row.len(), c0 * cfg.input_length);
    let x0 = Array2::from_shape_vec((c0, cfg.input_length), row.to_vec())
        .expect("input row reshapes to (channels, time)");
    let stem1_pre = conv1d_forward(&x0, lay.stem1.w_slice(p), lay.stem1.b_slice(p), lay.stem1.shape);
    let stem1_out = relu_forward(&stem1_pre);
    let stem2_pre = conv1d_forward(
        &stem1_out,
        lay.stem2.w_slice(p),
        lay.stem2.b_slice(p),
        lay.stem2.shape,
    );
    let mut cur = relu_forward(&stem2_pre);
    let mut blocks = Vec::with_capacity(lay.blocks.len());
    for bs in &lay.blocks {
        let t_in_len = cur.ncols();
        let (pooled, pool_src) = maxpool2_forward(&cur);
        let conv_a_pre = conv1d_forward(
            &pooled,
            bs.conv_a.w_slice(p),
            bs.conv_a.b_slice(p),
            bs.conv_a.shape,
        );
        let conv_a_out = relu_forward(&conv_a_pre);
        let conv_b_out = conv1d_forward(
            &conv_a_out,
            bs.conv_b.w_slice(p),
            bs.conv_b.b_slice(p),
            bs.conv_b.shape,
        );
        let shortcut_out = match &bs.shortcut {
            Some(sc) => proj_forward(&pooled, sc.w_slice(p), sc.b_slice(p), sc.out_ch),
            None => pooled.clone(),
        };
        let sum_pre = conv_b_out + shortcut_out;
        let relu_out = relu_forward(&sum_pre);
        let (next, nl_trace) = match &bs.nl {
            Some(nl) => {
                let theta = proj_forward(&relu_out, nl.theta.w_slice(p), nl.theta.b_slice(p), nl.embed);
                let phi = proj_forward(&relu_out, nl.phi.w_slice(p), nl.phi.b_slice(p), nl.embed);
                let g = proj_forward(&relu_out, nl.g.w_slice(p), nl.g.b_slice(p), nl.embed);
                let scores = theta.t().dot(&phi);
                let attention = softmax_rows(&scores);
                let y_att = g.dot(&attention.t());
                let projected = proj_forward(&y_att, nl.out.w_slice(p), nl.out.b_slice(p), nl.out.out_ch);
                let next = projected + &relu_out;
                (
                    next,
                    Some(NlTrace {
                        theta,
                        phi,
                        g,
                        attention,
                        y_att,
                    }),
                )
            }
            None => (relu_out.clone(), None),
        };
        blocks.push(BlockTrace {
            t_in_len,
            pooled,
            pool_src,
            conv_a_pre,
            conv_a_out,
            sum_pre,
            relu_out,
            nl: nl_trace,
        });
        cur = next;
    }
    let t_last = cur.ncols();
    let feat = gap_forward(&cur);
    let out = linear_forward(&feat, &p[lay.fc_w..], &p[lay.fc_b..], OUTPUT_DIM);
    SampleTrace {
        x0,
        stem1_pre,
        stem1_out,
        stem2_pre,
        blocks,
        t_last,
        feat,
        pred: [out[0], out[1]],
    }
}

fn backward_sample(model: &Model, trace: &SampleTrace, dpred: [f64; 2], grad: &mut [f64]) {
    let lay = &model.layout;
    let p = &model.params;
    let c_last = lay.c_last;
    let (gfeat, gw_fc, gb_fc) = linear_backward(
        &trace.feat,
        &p[lay.fc_w..lay.fc_w + OUTPUT_DIM * c_last],
        OUTPUT_DIM,
        &dpred,
    );
    accumulate(grad, lay.fc_w, &gw_fc);
    accumulate(grad, lay.fc_b, &gb_fc);
    let mut gout = gap_backward(c_last, trace.t_last, &gfeat);
    for (bs, bt) in lay.blocks.iter().zip(&trace.blocks).rev() {
        let mut g_relu = match (&bs.nl, &bt.nl) {
            (Some(nl), Some(nt)) => {
                let (g_yatt, gw_o, gb_o) =
                    proj_backward(&nt.y_att, nl.out.w_slice(p), nl.out.out_ch, &gout);
                accumulate(grad, nl.out.w, &gw_o);
                accumulate(grad, nl.out.b, &gb_o);
                let gg = g_yatt.dot(&nt.attention);
                let ga = g_yatt.t().dot(&nt.g);
                let gs = softmax_rows_backward(&nt.attention, &ga);
                let gtheta = nt.phi.dot(&gs.t());
                let gphi = nt.theta.dot(&gs);
                let (gx_t, gw_t, gb_t) =
                    proj_backward(&bt.relu_out, nl.theta.w_slice(p), nl.embed, &gtheta);
                accumulate(grad, nl.theta.w, &gw_t);
                accumulate(grad, nl.theta.b, &gb_t);
                let (gx_p, gw_p, gb_p) =
                    proj_backward(&bt.relu_out, nl.phi.w_slice(p), nl.embed, &gphi);
                accumulate(grad, nl.phi.w, &gw_p);
                accumulate(grad, nl.phi.b, &gb_p);
                let (gx_g, gw_g, gb_g) =
                    proj_backward(&bt.relu_out, nl.g.w_slice(p), nl.embed, &gg);
                accumulate(grad, nl.g.w, &gw_g);
                accumulate(grad, nl.g.b, &gb_g);
                gout + gx_t + gx_p + gx_g
            }
            _ => gout,
        };
        g_relu = relu_backward(&bt.sum_pre, &g_relu);
        let (g_conv_a_out, gw_b, gb_b) =
            conv1d_backward(&bt.conv_a_out, bs.conv_b.w_slice(p), bs.conv_b.shape, &g_relu);
        accumulate(grad, bs.conv_b.w, &gw_b);
        accumulate(grad, bs.conv_b.b, &gb_b);
        let g_pooled_shortcut = match &bs.shortcut {
            Some(sc) => {
                let (gx, gw, gb) = proj_backward(&bt.pooled, sc.w_slice(p), sc.out_ch, &g_relu);
                accumulate(grad, sc.w, &gw);
                accumulate(grad, sc.b, &gb);
                gx
            }
            None => g_relu.clone(),
        };
        let g_conv_a_pre = relu_backward(&bt.conv_a_pre, &g_conv_a_out);
        let (g_pooled_a, gw_a, gb_a) =
            conv1d_backward(&bt.pooled, bs.conv_a.w_slice(p), bs.conv_a.shape, &g_conv_a_pre);
        accumulate(grad, bs.conv_a.w, &gw_a);
        accumulate(grad, bs.conv_a.b, &gb_a);
        let g_pooled = g_pooled_a + g_pooled_shortcut;
        gout = maxpool2_backward(&bt.pool_src, bt.t_in_len, &g_pooled);
    }
    let g_stem2_pre = relu_backward(&trace.stem2_pre, &gout);
    let (g_stem1_out, gw_s2, gb_s2) = conv1d_backward(
        &trace.stem1_out,
        lay.stem2.w_slice(p),
        lay.stem2.shape,
        &g_stem2_pre,
    );
    accumulate(grad, lay.stem2.w, &gw_s2);
    accumulate(grad, lay.stem2.b, &gb_s2);
    let g_stem1_pre = relu_backward(&trace.stem1_pre, &g_stem1_out);
    let (_, gw_s1, gb_s1) = conv1d_backward(
        &trace.x0,
        lay.stem1.w_slice(p),
        lay.stem1.shape,
        &g_stem1_pre,
    );
    accumulate(grad, lay.stem1.w, &gw_s1);
    accumulate(grad, lay.stem1.b, &gb_s1);
}

fn accumulate(grad: &mut [f64], offset: usize, values: &[f64]) {
    for (g, v) in grad[offset..offset + values.len()].iter_mut().zip(values) {
        *g += v;
    }
}

fn check_batch_shapes(model: &Model, batch: &ArrayView2<f64>) -> Result<()> {
    let width = model.config.input_mode.channels() * model.config.input_length;
    if batch.ncols() != width {
        return Err(Error::shape(format!(
            "net: batch width {} does not match {} input channels x length {}",
            batch.ncols(),
            model.config.input_mode.channels(),
            model.config.input_length
        )));
    }
    if batch.nrows() == 0 {
        return Err(Error::shape("net: batch must contain at least one row"));
    }
    Ok(())
}

/// Runs the network on preprocessed rows, returning raw `B x 2` outputs in scaled units.
pub fn forward(model: &Model, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_batch_shapes(model, &batch)?;
    let rows: Vec<[f64; 2]> = (0..batch.nrows())
        .into_par_iter()
        .map(|i| {
            let row = batch.row(i);
            forward_traced(model, row.as_slice().expect("batch rows are contiguous")).pred
        })
        .collect();
    let mut out = Array2::zeros((rows.len(), OUTPUT_DIM));
    for (i, r) in rows.iter().enumerate() {
        out[[i, 0]] = r[0];
        out[[i, 1]] = r[1];
    }
    Ok(out)
}

/// Runs one preprocessed row and also returns every attention matrix in block order.
pub fn forward_with_attention(model: &Model, row: &[f64]) -> Result<([f64; 2], Vec<Array2<f64>>)> {
    let width = model.config.input_mode.channels() * model.config.input_length;
    if row.len() != width {
        return Err(Error::shape(format!(
            "net: row length {} does not match expected input width {width}",
            row.len()
        )));
    }
    let trace = forward_traced(model, row);
    let attention = trace
        .blocks
        .iter()
        .filter_map(|b| b.nl.as_ref().map(|nl| nl.attention.clone()))
        .collect();
    Ok((trace.pred, attention))
}

fn rmse_from_preds(preds: &Array2<f64>, targets: &ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = (preds.nrows() * OUTPUT_DIM) as f64;
    let diff = preds - targets;
    let sse: f64 = diff.iter().map(|d| d * d).sum();
    let loss = (sse / n).sqrt();
    let dpred = if loss > 0.0 {
        diff.mapv(|d| d / (n * loss))
    } else {
        Array2::zeros(diff.dim())
    };
    (loss, dpred)
}

/// Batch loss and its gradient with respect to every parameter.
///
/// The loss is the root mean squared error over all `B x 2` scaled outputs.
/// Per-sample gradients are reduced in fixed chunks in index order, so the
/// result is bitwise independent of the number of worker threads.
pub fn loss_and_gradient(
    model: &Model,
    batch: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> Result<(f64, Vec<f64>)> {
    check_batch_shapes(model, &batch)?;
    if targets.nrows() != batch.nrows() || targets.ncols() != OUTPUT_DIM {
        return Err(Error::shape(format!(
            "net: targets shape ({}, {}) does not match batch rows {} x {OUTPUT_DIM}",
            targets.nrows(),
            targets.ncols(),
            batch.nrows()
        )));
    }
    let traces: Vec<SampleTrace> = (0..batch.nrows())
        .into_par_iter()
        .map(|i| {
            let row = batch.row(i);
            forward_traced(model, row.as_slice().expect("batch rows are contiguous"))
        })
        .collect();
    let mut preds = Array2::zeros((batch.nrows(), OUTPUT_DIM));
    for (i, t) in traces.iter().enumerate() {
        preds[[i, 0]] = t.pred[0];
        preds[[i, 1]] = t.pred[1];
    }
    let (loss, dpred) = rmse_from_preds(&preds, &targets);
    if !loss.is_finite() {
        let worst = preds.iter().cloned().fold(0.0f64, |a, v| a.max(v.abs()));
        return Err(Error::numerical(format!(
            "net: non-finite loss {loss} (largest |output| {worst:.3e})"
        )));
    }
    let indices: Vec<usize> = (0..batch.nrows()).collect();
    let chunk_grads: Vec<Vec<f64>> = indices
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut local = vec![0.0; model.params.len()];
            for &i in chunk {
                backward_sample(model, &traces[i], [dpred[[i, 0]], dpred[[i, 1]]], &mut local);
            }
            local
        })
        .collect();
    let mut grad = vec![0.0; model.params.len()];
    for local in &chunk_grads {
        for (g, v) in grad.iter_mut().zip(local) {
            *g += v;
        }
    }
    Ok((loss, grad))
}

fn adam_update(model: &mut Model, grad: &[f64], lr: f64, cfg: &TrainConfig) {
    model.adam_t += 1;
    let t = model.adam_t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for i in 0..model.params.len() {
        let g = grad[i];
        model.adam_m[i] = cfg.beta1 * model.adam_m[i] + (1.0 - cfg.beta1) * g;
        model.adam_v[i] = cfg.beta2 * model.adam_v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = model.adam_m[i] / bc1;
        let v_hat = model.adam_v[i] / bc2;
        model.params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

fn project_max_norm(model: &mut Model) {
    let c = model.config.maxnorm_c;
    for slot in &model.layout.slots {
        if slot.shape.len() < 2 {
            continue;
        }
        let rows = slot.shape[0];
        let row_len = slot.len / rows;
        for r in 0..rows {
            let row = &mut model.params[slot.offset + r * row_len..slot.offset + (r + 1) * row_len];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > c {
                let scale = c / norm;
                for v in row {
                    *v *= scale;
                }
            }
        }
    }
}

/// One optimization step: loss, gradients, Adam update at the scheduled rate
/// for `epoch`, then the max-norm projection on every filter.
pub fn backward_and_step(
    model: &mut Model,
    batch: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    cfg.validate()?;
    let (loss, grad) = loss_and_gradient(model, batch, targets).map_err(|e| match e {
        Error::Numerical(msg) => Error::numerical(format!(
            "net: step at epoch {epoch}, adam step {}: {msg}",
            model.adam_t + 1
        )),
        other => other,
    })?;
    let lr = cfg.lr_at(epoch);
    adam_update(model, &grad, lr, cfg);
    project_max_norm(model);
    Ok(loss)
}

/// Converts one complex signature into normalized real network input channels.
pub fn preprocess_signature(signature: &[Complex64], mode: InputMode) -> Result<Vec<f64>> {
    if signature.is_empty() {
        return Err(Error::shape("net: empty signature"));
    }
    let mut v: Vec<f64> = match mode {
        InputMode::Magnitude => signature.iter().map(|z| z.norm()).collect(),
        InputMode::Real => signature.iter().map(|z| z.re).collect(),
        InputMode::RealImag => {
            let mut out: Vec<f64> = signature.iter().map(|z| z.re).collect();
            out.extend(signature.iter().map(|z| z.im));
            out
        }
    };
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::numerical("net: signature contains non-finite values"));
    }
    if norm == 0.0 {
        return Err(Error::numerical(
            "net: signature is zero after input projection and cannot be normalized",
        ));
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

/// Maps raw signatures to `(t1_ms, t2_ms)` estimates, clamped to `[0, 1.5 x scale]`.
pub fn predict(model: &Model, signatures: ArrayView2<Complex64>) -> Result<Array2<f64>> {
    if signatures.ncols() != model.config.input_length {
        return Err(Error::shape(format!(
            "net: signature length {} does not match model input length {}",
            signatures.ncols(),
            model.config.input_length
        )));
    }
    let (s1, s2) = model.config.target_scale;
    let rows: Vec<[f64; 2]> = (0..signatures.nrows())
        .into_par_iter()
        .map(|i| -> Result<[f64; 2]> {
            let row = signatures.row(i);
            let input = preprocess_signature(
                row.as_slice().expect("signature rows are contiguous"),
                model.config.input_mode,
            )?;
            let pred = forward_traced(model, &input).pred;
            Ok([
                (pred[0] * s1).clamp(0.0, 1.5 * s1),
                (pred[1] * s2).clamp(0.0, 1.5 * s2),
            ])
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((rows.len(), OUTPUT_DIM));
    for (i, r) in rows.iter().enumerate() {
        out[[i, 0]] = r[0];
        out[[i, 1]] = r[1];
    }
    Ok(out)
}

struct Snapshot {
    params: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_t: u64,
    epoch: usize,
    val_rmse: f64,
}

/// Trains on a dictionary with a seeded shuffle split and returns the model
/// from the epoch with the lowest validation loss, with the full history attached.
pub fn train(mut model: Model, dict: &Dictionary, cfg: &TrainConfig) -> Result<Model> {
    cfg.validate()?;
    model.config.validate()?;
    if dict.signature_len() != model.config.input_length {
        return Err(Error::shape(format!(
            "net: dictionary signature length {} does not match model input length {}",
            dict.signature_len(),
            model.config.input_length
        )));
    }
    if cfg.epochs == 0 {
        return Ok(model);
    }
    let k = dict.len();
    if k < 2 {
        return Err(Error::parameter(
            "net: training needs at least 2 dictionary entries to split",
        ));
    }
    let (s1, s2) = model.config.target_scale;
    let inputs: Vec<Vec<f64>> = dict
        .signatures
        .outer_iter()
        .map(|row| {
            preprocess_signature(
                row.as_slice().expect("dictionary rows are contiguous"),
                model.config.input_mode,
            )
        })
        .collect::<Result<_>>()?;
    let targets: Vec<[f64; 2]> = dict
        .lut
        .entries
        .iter()
        .map(|&(t1, t2)| [t1 / s1, t2 / s2])
        .collect();
    let width = inputs[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut perm: Vec<usize> = (0..k).collect();
    shuffle(&mut perm, &mut rng);
    let n_val = ((cfg.validation_fraction * k as f64).round() as usize).clamp(1, k - 1);
    let val_idx: Vec<usize> = perm[..n_val].to_vec();
    let mut train_idx: Vec<usize> = perm[n_val..].to_vec();
    let assemble = |idx: &[usize]| -> (Array2<f64>, Array2<f64>) {
        let mut x = Array2::zeros((idx.len(), width));
        let mut y = Array2::zeros((idx.len(), OUTPUT_DIM));
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r)
                .as_slice_mut()
                .expect("assembled rows are contiguous")
                .copy_from_slice(&inputs[i]);
            y[[r, 0]] = targets[i][0];
            y[[r, 1]] = targets[i][1];
        }
        (x, y)
    };
    let (val_x, val_y) = assemble(&val_idx);
    let mut best: Option<Snapshot> = None;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        model.epoch = epoch;
        shuffle(&mut train_idx, &mut rng);
        let mut sse = 0.0;
        let mut count = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let (bx, by) = assemble(chunk);
            let loss = backward_and_step(&mut model, bx.view(), by.view(), cfg, epoch)?;
            let n = (chunk.len() * OUTPUT_DIM) as f64;
            sse += loss * loss * n;
            count += n;
        }
        let train_rmse = (sse / count).sqrt();
        let val_preds = forward(&model, val_x.view())?;
        let (val_rmse, _) = rmse_from_preds(&val_preds, &val_y.view());
        if !val_rmse.is_finite() {
            return Err(Error::numerical(format!(
                "net: non-finite validation loss at epoch {epoch}"
            )));
        }
        model.history.push(EpochStats {
            epoch,
            lr: cfg.lr_at(epoch),
            train_rmse,
            val_rmse,
            seconds: started.elapsed().as_secs_f64(),
        });
        let improved = best.as_ref().is_none_or(|b| val_rmse < b.val_rmse);
        if improved {
            best = Some(Snapshot {
                params: model.params.clone(),
                adam_m: model.adam_m.clone(),
                adam_v: model.adam_v.clone(),
                adam_t: model.adam_t,
                epoch,
                val_rmse,
            });
        }
    }
    if let Some(b) = best {
        model.params = b.params;
        model.adam_m = b.adam_m;
        model.adam_v = b.adam_v;
        model.adam_t = b.adam_t;
        model.epoch = b.epoch;
    }
    Ok(model)
}

fn shuffle(idx: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
}

/// Writes the per-epoch training log as CSV.
pub fn write_history_csv(history: &[EpochStats], path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::from("epoch,lr,train_rmse,val_rmse,seconds\n");
    for row in history {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.epoch, row.lr, row.train_rmse, row.val_rmse, row.seconds
        ));
    }
    std::fs::write(path.as_ref(), text).map_err(|e| {
        Error::io(
            format!("net: writing training log {}", path.as_ref().display()),
            e,
        )
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: NetConfig,
    epoch: usize,
    adam_t: u64,
    param_count: usize,
    sections: Vec<CheckpointSection>,
    layers: Vec<LayerSlot>,
    history: Vec<EpochStats>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointSection {
    name: String,
    offset: usize,
    len: usize,
}

fn vec_tensor_bytes(values: &[f64]) -> Vec<u8> {
    let arr = ArrayD::from_shape_vec(IxDyn(&[values.len()]), values.to_vec())
        .expect("flat vector reshapes to 1-D");
    persist::tensor_to_bytes(&Tensor::Real(arr))
}

/// Saves the model, optimizer state, and history as a single checkpoint file.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tensors = [
        ("params", vec_tensor_bytes(&model.params)),
        ("adam_m", vec_tensor_bytes(&model.adam_m)),
        ("adam_v", vec_tensor_bytes(&model.adam_v)),
    ];
    let mut sections = Vec::new();
    let mut offset = 0usize;
    for (name, bytes) in &tensors {
        sections.push(CheckpointSection {
            name: (*name).to_string(),
            offset,
            len: bytes.len(),
        });
        offset += bytes.len();
    }
    let header = CheckpointHeader {
        format: "mrf-net-checkpoint".to_string(),
        version: 1,
        config: model.config.clone(),
        epoch: model.epoch,
        adam_t: model.adam_t,
        param_count: model.params.len(),
        sections,
        layers: model.layout.slots.clone(),
        history: model.history.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::numerical(format!("net: encoding checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, bytes) in &tensors {
        out.extend_from_slice(bytes);
    }
    std::fs::write(path, out)
        .map_err(|e| Error::io(format!("net: writing checkpoint {}", path.display()), e))
}

fn checkpoint_vec(
    bytes: &[u8],
    base: usize,
    section: &CheckpointSection,
    expected_len: usize,
    origin: &str,
) -> Result<Vec<f64>> {
    let start = base + section.offset;
    let end = start + section.len;
    if end > bytes.len() {
        return Err(Error::integrity(format!(
            "{origin}: section {} extends past end of file",
            section.name
        )));
    }
    let tensor = persist::tensor_from_bytes(&bytes[start..end], origin)?;
    let arr = tensor.into_real()?;
    let v = arr.into_raw_vec_and_offset().0;
    if v.len() != expected_len {
        return Err(Error::integrity(format!(
            "{origin}: section {} holds {} values, expected {expected_len}",
            section.name,
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::integrity(format!(
            "{origin}: section {} contains non-finite values",
            section.name
        )));
    }
    Ok(v)
}

/// Loads a checkpoint, revalidating the architecture, layout, and tensors.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::io(format!("net: reading checkpoint {origin}"), e))?;
    if bytes.len() < 8 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::integrity(format!(
            "{origin}: not a model checkpoint file"
        )));
    }
    let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if 8 + header_len > bytes.len() {
        return Err(Error::integrity(format!(
            "{origin}: header length {header_len} exceeds file size"
        )));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| Error::integrity(format!("{origin}: parsing checkpoint header: {e}")))?;
    if header.format != "mrf-net-checkpoint" || header.version != 1 {
        return Err(Error::integrity(format!(
            "{origin}: unsupported checkpoint format {} version {}",
            header.format, header.version
        )));
    }
    header.config.validate()?;
    let layout = build_layout(&header.config);
    if layout.total != header.param_count || layout.slots != header.layers {
        return Err(Error::integrity(format!(
            "{origin}: stored layer table does not match the declared architecture"
        )));
    }
    let base = 8 + header_len;
    let mut params = None;
    let mut adam_m = None;
    let mut adam_v = None;
    for section in &header.sections {
        let v = checkpoint_vec(&bytes, base, section, layout.total, &origin)?;
        match section.name.as_str() {
            "params" => params = Some(v),
            "adam_m" => adam_m = Some(v),
            "adam_v" => adam_v = Some(v),
            other => {
                return Err(Error::integrity(format!(
                    "{origin}: unknown checkpoint section {other:?}"
                )))
            }
        }
    }
    let (params, adam_m, adam_v) = match (params, adam_m, adam_v) {
        (Some(p), Some(m), Some(v)) => (p, m, v),
        _ => {
            return Err(Error::integrity(format!(
                "{origin}: checkpoint is missing a parameter or moment section"
            )))
        }
    };
    Ok(Model {
        config: header.config,
        params,
        adam_m,
        adam_v,
        adam_t: header.adam_t,
        epoch: header.epoch,
        history: header.history,
        layout,
    })
}
