//! The depth regressor: a small convolutional encoder with squeeze-and-
//! excitation channel attention, followed by a residual regression head that
//! applies a learnable scale/shift affine to the scalar output.
//!
//! Architecture (defaults in parentheses):
//!
//! ```text
//! input S×S → [conv 3×3 stride 2 + relu] ×3   (channels 16/32/64)
//!             SE gate after stages 2 and 3    (reduction 4)
//!           → global average pool → feature vector (64)
//! head      → FC(64→64) + relu + dropout, residual skip from the pooled
//!             vector; FC(64→32) + relu + dropout; FC(32→1)
//!           → ŷ = γ·z + β                      (γ init 1, β init label mean)
//! ```
//!
//! The scalar output carries whatever unit the training labels carried;
//! this toolkit trains in mm.
//!
//! Gradients are exact reverse-mode derivatives of the hybrid loss
//! λ·MSE + (1−λ)·MAE, with sign(0) = 0 for the MAE subgradient. Dropout
//! masks are recorded so a finite-difference oracle can replay them.
//!
//! The encoder hides behind [`Backbone`] so a higher-fidelity pretrained
//! network can replace it at inference without touching the head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::reconstruct::ModelInput;
use crate::util::standard_normal;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("non-finite activation in {stage}")]
    NonFinite { stage: &'static str },
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },
}

/// Which regression head sits on the pooled features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Three FC stages with a residual skip and a learnable output affine.
    Rrh,
    /// Plain FC(features→1); the head-ablation arm.
    SingleFc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input side length S.
    pub input_size: usize,
    /// Output channels of the three conv stages.
    pub channels: [usize; 3],
    /// SE bottleneck reduction ratio r.
    pub se_reduction: usize,
    /// Hidden width of the second head stage.
    pub rrh_hidden: usize,
    /// Dropout rate in the head (train mode only).
    pub dropout: f64,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            channels: [16, 32, 64],
            se_reduction: 4,
            rrh_hidden: 32,
            dropout: 0.2,
            head: HeadKind::Rrh,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |name, reason: String| Err(ModelError::InvalidParam { name, reason });
        if self.input_size < 8 {
            return err("input_size", format!("must be >= 8, got {}", self.input_size));
        }
        if self.channels.contains(&0) {
            return err("channels", "must be positive".into());
        }
        if self.se_reduction == 0
            || !self.channels[1].is_multiple_of(self.se_reduction)
            || !self.channels[2].is_multiple_of(self.se_reduction)
        {
            return err(
                "se_reduction",
                format!(
                    "must divide channels {}/{}",
                    self.channels[1], self.channels[2]
                ),
            );
        }
        if self.rrh_hidden == 0 {
            return err("rrh_hidden", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("dropout", format!("must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Spatial side after one stride-2, pad-1, 3×3 conv.
    fn halved(side: usize) -> usize {
        (side - 1) / 2 + 1
    }

    fn stage_sides(&self) -> [usize; 3] {
        let s1 = Self::halved(self.input_size);
        let s2 = Self::halved(s1);
        let s3 = Self::halved(s2);
        [s1, s2, s3]
    }

    /// Dimension of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.channels[2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    /// [out_ch][in_ch][3][3], row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeParams {
    pub channels: usize,
    pub reduced: usize,
    /// [reduced][channels]: squeeze projection.
    pub w1: Vec<f64>,
    /// [channels][reduced]: excitation projection.
    pub w2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// [out_dim][in_dim], row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FcLayer {
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let acc: f64 = row.iter().zip(x.iter()).map(|(w, v)| w * v).sum();
            out.push(acc + self.bias[o]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadParams {
    Rrh {
        fc1: FcLayer,
        fc2: FcLayer,
        fc3: FcLayer,
        /// Learnable output scale γ.
        gamma: f64,
        /// Learnable output shift β.
        beta: f64,
    },
    SingleFc { fc: FcLayer },
}

/// All learnable tensors plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
    pub se2: SeParams,
    pub se3: SeParams,
    pub head: HeadParams,
}

fn he_normal(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n).map(|_| std * standard_normal(rng)).collect()
}

/// He-style fan-in initialization, zero biases, γ = 1, β = the training
/// label mean when provided. Deterministic per seed.
pub fn init_params(
    config: &ModelConfig,
    seed: u64,
    label_mean: Option<f64>,
) -> Result<ModelParams, ModelError> {
    config.validate()?;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c1, c2, c3] = config.channels;
    let conv = |rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize| ConvLayer {
        in_ch,
        out_ch,
        weights: he_normal(rng, out_ch * in_ch * 9, in_ch * 9),
        bias: vec![0.0; out_ch],
    };
    let se = |rng: &mut ChaCha8Rng, channels: usize, reduction: usize| {
        let reduced = channels / reduction;
        SeParams {
            channels,
            reduced,
            w1: he_normal(rng, reduced * channels, channels),
            w2: he_normal(rng, channels * reduced, reduced),
        }
    };
    let fc = |rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize| FcLayer {
        in_dim,
        out_dim,
        weights: he_normal(rng, out_dim * in_dim, in_dim),
        bias: vec![0.0; out_dim],
    };

    let conv1 = conv(&mut rng, 1, c1);
    let conv2 = conv(&mut rng, c1, c2);
    let conv3 = conv(&mut rng, c2, c3);
    let se2 = se(&mut rng, c2, config.se_reduction);
    let se3 = se(&mut rng, c3, config.se_reduction);
    let head = match config.head {
        HeadKind::Rrh => HeadParams::Rrh {
            fc1: fc(&mut rng, c3, c3),
            fc2: fc(&mut rng, c3, config.rrh_hidden),
            fc3: fc(&mut rng, config.rrh_hidden, 1),
            gamma: 1.0,
            beta: label_mean.unwrap_or(0.0),
        },
        HeadKind::SingleFc => HeadParams::SingleFc {
            fc: fc(&mut rng, c3, 1),
        },
    };

    Ok(ModelParams {
        config: *config,
        conv1,
        conv2,
        conv3,
        se2,
        se3,
        head,
    })
}

impl ModelParams {
    /// Same structure with every tensor zeroed; used as a gradient
    /// accumulator.
    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for t in [
            &mut z.conv1.weights,
            &mut z.conv1.bias,
            &mut z.conv2.weights,
            &mut z.conv2.bias,
            &mut z.conv3.weights,
            &mut z.conv3.bias,
            &mut z.se2.w1,
            &mut z.se2.w2,
            &mut z.se3.w1,
            &mut z.se3.w2,
        ] {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        match &mut z.head {
            HeadParams::Rrh {
                fc1,
                fc2,
                fc3,
                gamma,
                beta,
            } => {
                for t in [
                    &mut fc1.weights,
                    &mut fc1.bias,
                    &mut fc2.weights,
                    &mut fc2.bias,
                    &mut fc3.weights,
                    &mut fc3.bias,
                ] {
                    t.iter_mut().for_each(|v| *v = 0.0);
                }
                *gamma = 0.0;
                *beta = 0.0;
            }
            HeadParams::SingleFc { fc } => {
                fc.weights.iter_mut().for_each(|v| *v = 0.0);
                fc.bias.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        z
    }

    /// Named parameter groups in canonical order, for per-group reporting.
    pub fn group_names(&self) -> Vec<&'static str> {
        let mut names = vec![
            "conv1.weights",
            "conv1.bias",
            "conv2.weights",
            "conv2.bias",
            "conv3.weights",
            "conv3.bias",
            "se2.w1",
            "se2.w2",
            "se3.w1",
            "se3.w2",
        ];
        match self.head {
            HeadParams::Rrh { .. } => names.extend([
                "head.fc1.weights",
                "head.fc1.bias",
                "head.fc2.weights",
                "head.fc2.bias",
                "head.fc3.weights",
                "head.fc3.bias",
                "head.gamma",
                "head.beta",
            ]),
            HeadParams::SingleFc { .. } => names.extend(["head.fc.weights", "head.fc.bias"]),
        }
        names
    }

    /// Group boundaries (start offsets into the flat vector), aligned with
    /// [`Self::group_names`].
    pub fn group_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::new();
        let mut acc = 0usize;
        let mut push = |len: usize, offsets: &mut Vec<usize>| {
            offsets.push(acc);
            acc += len;
        };
        push(self.conv1.weights.len(), &mut offsets);
        push(self.conv1.bias.len(), &mut offsets);
        push(self.conv2.weights.len(), &mut offsets);
        push(self.conv2.bias.len(), &mut offsets);
        push(self.conv3.weights.len(), &mut offsets);
        push(self.conv3.bias.len(), &mut offsets);
        push(self.se2.w1.len(), &mut offsets);
        push(self.se2.w2.len(), &mut offsets);
        push(self.se3.w1.len(), &mut offsets);
        push(self.se3.w2.len(), &mut offsets);
        match &self.head {
            HeadParams::Rrh { fc1, fc2, fc3, .. } => {
                push(fc1.weights.len(), &mut offsets);
                push(fc1.bias.len(), &mut offsets);
                push(fc2.weights.len(), &mut offsets);
                push(fc2.bias.len(), &mut offsets);
                push(fc3.weights.len(), &mut offsets);
                push(fc3.bias.len(), &mut offsets);
                push(1, &mut offsets);
                push(1, &mut offsets);
            }
            HeadParams::SingleFc { fc } => {
                push(fc.weights.len(), &mut offsets);
                push(fc.bias.len(), &mut offsets);
            }
        }
        offsets
    }

    /// Flatten every learnable scalar into one vector (canonical order).
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        flat.extend_from_slice(&self.conv1.weights);
        flat.extend_from_slice(&self.conv1.bias);
        flat.extend_from_slice(&self.conv2.weights);
        flat.extend_from_slice(&self.conv2.bias);
        flat.extend_from_slice(&self.conv3.weights);
        flat.extend_from_slice(&self.conv3.bias);
        flat.extend_from_slice(&self.se2.w1);
        flat.extend_from_slice(&self.se2.w2);
        flat.extend_from_slice(&self.se3.w1);
        flat.extend_from_slice(&self.se3.w2);
        match &self.head {
            HeadParams::Rrh {
                fc1,
                fc2,
                fc3,
                gamma,
                beta,
            } => {
                flat.extend_from_slice(&fc1.weights);
                flat.extend_from_slice(&fc1.bias);
                flat.extend_from_slice(&fc2.weights);
                flat.extend_from_slice(&fc2.bias);
                flat.extend_from_slice(&fc3.weights);
                flat.extend_from_slice(&fc3.bias);
                flat.push(*gamma);
                flat.push(*beta);
            }
            HeadParams::SingleFc { fc } => {
                flat.extend_from_slice(&fc.weights);
                flat.extend_from_slice(&fc.bias);
            }
        }
        flat
    }

    /// Inverse of [`Self::flatten`].
    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(ModelError::ShapeMismatch {
                what: "flat parameter vector",
                expected,
                got: flat.len(),
            });
        }
        let mut pos = 0usize;
        let take = |dst: &mut [f64], pos: &mut usize| {
            dst.copy_from_slice(&flat[*pos..*pos + dst.len()]);
            *pos += dst.len();
        };
        take(&mut self.conv1.weights, &mut pos);
        take(&mut self.conv1.bias, &mut pos);
        take(&mut self.conv2.weights, &mut pos);
        take(&mut self.conv2.bias, &mut pos);
        take(&mut self.conv3.weights, &mut pos);
        take(&mut self.conv3.bias, &mut pos);
        take(&mut self.se2.w1, &mut pos);
        take(&mut self.se2.w2, &mut pos);
        take(&mut self.se3.w1, &mut pos);
        take(&mut self.se3.w2, &mut pos);
        match &mut self.head {
            HeadParams::Rrh {
                fc1,
                fc2,
                fc3,
                gamma,
                beta,
            } => {
                take(&mut fc1.weights, &mut pos);
                take(&mut fc1.bias, &mut pos);
                take(&mut fc2.weights, &mut pos);
                take(&mut fc2.bias, &mut pos);
                take(&mut fc3.weights, &mut pos);
                take(&mut fc3.bias, &mut pos);
                *gamma = flat[pos];
                *beta = flat[pos + 1];
                pos += 2;
            }
            HeadParams::SingleFc { fc } => {
                take(&mut fc.weights, &mut pos);
                take(&mut fc.bias, &mut pos);
            }
        }
        debug_assert_eq!(pos, expected);
        Ok(())
    }

    /// Mutable access to one scalar by its flat index (canonical order).
    ///
    /// This is what finite-difference harnesses want: perturb one entry and
    /// restore it, without copying the whole parameter set around.
    pub fn flat_slot_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        macro_rules! walk {
            ($slice:expr) => {
                if index < $slice.len() {
                    return Some(&mut $slice[index]);
                }
                index -= $slice.len();
            };
        }
        walk!(self.conv1.weights);
        walk!(self.conv1.bias);
        walk!(self.conv2.weights);
        walk!(self.conv2.bias);
        walk!(self.conv3.weights);
        walk!(self.conv3.bias);
        walk!(self.se2.w1);
        walk!(self.se2.w2);
        walk!(self.se3.w1);
        walk!(self.se3.w2);
        match &mut self.head {
            HeadParams::Rrh {
                fc1,
                fc2,
                fc3,
                gamma,
                beta,
            } => {
                walk!(fc1.weights);
                walk!(fc1.bias);
                walk!(fc2.weights);
                walk!(fc2.bias);
                walk!(fc3.weights);
                walk!(fc3.bias);
                if index == 0 {
                    return Some(gamma);
                }
                if index == 1 {
                    return Some(beta);
                }
                None
            }
            HeadParams::SingleFc { fc } => {
                walk!(fc.weights);
                walk!(fc.bias);
                None
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let base = self.conv1.weights.len()
            + self.conv1.bias.len()
            + self.conv2.weights.len()
            + self.conv2.bias.len()
            + self.conv3.weights.len()
            + self.conv3.bias.len()
            + self.se2.w1.len()
            + self.se2.w2.len()
            + self.se3.w1.len()
            + self.se3.w2.len();
        base + match &self.head {
            HeadParams::Rrh { fc1, fc2, fc3, .. } => {
                fc1.weights.len()
                    + fc1.bias.len()
                    + fc2.weights.len()
                    + fc2.bias.len()
                    + fc3.weights.len()
                    + fc3.bias.len()
                    + 2
            }
            HeadParams::SingleFc { fc } => fc.weights.len() + fc.bias.len(),
        }
    }
}

/// Serializable checkpoint: versioned parameters plus the seed they came
/// from. The architecture config travels inside [`ModelParams`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(seed: u64, params: ModelParams) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            seed,
            params,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::InvalidParam {
                name: "format_version",
                reason: format!(
                    "unsupported version {} (expected {})",
                    self.format_version, CHECKPOINT_FORMAT_VERSION
                ),
            });
        }
        self.params.config.validate()?;
        let fresh = init_params(&self.params.config, 0, None)?;
        if fresh.param_count() != self.params.param_count() {
            return Err(ModelError::ShapeMismatch {
                what: "checkpoint tensors",
                expected: fresh.param_count(),
                got: self.params.param_count(),
            });
        }
        Ok(())
    }
}

/// Per-sample dropout mask record (head stages 1 and 2).
///
/// `true` means kept; kept units are scaled by 1/(1−p) at train time so
/// eval mode is the identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutMasks {
    pub stage1: Vec<bool>,
    pub stage2: Vec<bool>,
}

impl DropoutMasks {
    fn all_kept(config: &ModelConfig) -> Self {
        Self {
            stage1: vec![true; config.feature_dim()],
            stage2: vec![true; config.rrh_hidden],
        }
    }

    fn sample(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let p = config.dropout;
        let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<bool> {
            (0..n).map(|_| rng.random::<f64>() >= p).collect()
        };
        Self {
            stage1: draw(config.feature_dim(), rng),
            stage2: draw(config.rrh_hidden, rng),
        }
    }
}

/// Cached activations needed for exact backprop of one sample.
///
/// Only produced in training mode.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    h1: Vec<f64>,
    h2: Vec<f64>,
    se2_cache: SeCache,
    s2: Vec<f64>,
    h3: Vec<f64>,
    se3_cache: SeCache,
    s3: Vec<f64>,
    pooled: Vec<f64>,
    head: HeadTrace,
    pub masks: DropoutMasks,
    /// Pre-affine scalar z.
    pub z: f64,
    pub prediction: f64,
}

#[derive(Debug, Clone)]
struct SeCache {
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    gate: Vec<f64>,
}

#[derive(Debug, Clone)]
enum HeadTrace {
    Rrh {
        t1: Vec<f64>,
        r1: Vec<f64>,
        t2: Vec<f64>,
        d2: Vec<f64>,
    },
    SingleFc,
}

enum DropoutPlan<'a> {
    Eval,
    Replay(&'a DropoutMasks),
}

fn check_finite(stage: &'static str, values: &[f64]) -> Result<(), ModelError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { stage })
    }
}

/// 3×3, stride-2, pad-1 convolution.
fn conv_forward(layer: &ConvLayer, input: &[f64], side: usize) -> (Vec<f64>, usize) {
    let out_side = ModelConfig::halved(side);
    let mut out = vec![0.0f64; layer.out_ch * out_side * out_side];
    for o in 0..layer.out_ch {
        let out_plane = &mut out[o * out_side * out_side..(o + 1) * out_side * out_side];
        out_plane.iter_mut().for_each(|v| *v = layer.bias[o]);
        for i in 0..layer.in_ch {
            let in_plane = &input[i * side * side..(i + 1) * side * side];
            let w_base = (o * layer.in_ch + i) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let w = layer.weights[w_base + ky * 3 + kx];
                    if w == 0.0 {
                        continue;
                    }
                    for oy in 0..out_side {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy as usize >= side {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * side..(iy as usize + 1) * side];
                        let out_row = &mut out_plane[oy * out_side..(oy + 1) * out_side];
                        for (ox, dst) in out_row.iter_mut().enumerate() {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix >= 0 && (ix as usize) < side {
                                *dst += w * in_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, out_side)
}

/// Backward pass of [`conv_forward`]: accumulates weight/bias grads and
/// returns the input gradient.
fn conv_backward(
    layer: &ConvLayer,
    input: &[f64],
    side: usize,
    d_out: &[f64],
    out_side: usize,
    g_weights: &mut [f64],
    g_bias: &mut [f64],
) -> Vec<f64> {
    let mut d_in = vec![0.0f64; layer.in_ch * side * side];
    for o in 0..layer.out_ch {
        let d_plane = &d_out[o * out_side * out_side..(o + 1) * out_side * out_side];
        g_bias[o] += d_plane.iter().sum::<f64>();
        for i in 0..layer.in_ch {
            let in_plane = &input[i * side * side..(i + 1) * side * side];
            let d_in_plane = &mut d_in[i * side * side..(i + 1) * side * side];
            let w_base = (o * layer.in_ch + i) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let w = layer.weights[w_base + ky * 3 + kx];
                    let mut gw = 0.0f64;
                    for oy in 0..out_side {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy as usize >= side {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * side..(iy as usize + 1) * side];
                        let d_row = &d_plane[oy * out_side..(oy + 1) * out_side];
                        let d_in_row =
                            &mut d_in_plane[iy as usize * side..(iy as usize + 1) * side];
                        for (ox, &g) in d_row.iter().enumerate() {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix >= 0 && (ix as usize) < side {
                                gw += g * in_row[ix as usize];
                                d_in_row[ix as usize] += g * w;
                            }
                        }
                    }
                    g_weights[w_base + ky * 3 + kx] += gw;
                }
            }
        }
    }
    d_in
}

fn relu_inplace(values: &mut [f64]) {
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn se_forward(se: &SeParams, features: &[f64], hw: usize) -> (Vec<f64>, SeCache) {
    let c = se.channels;
    let inv = 1.0 / hw as f64;
    let pooled: Vec<f64> = (0..c)
        .map(|ch| features[ch * hw..(ch + 1) * hw].iter().sum::<f64>() * inv)
        .collect();
    let mut hidden = vec![0.0f64; se.reduced];
    for (j, h) in hidden.iter_mut().enumerate() {
        let row = &se.w1[j * c..(j + 1) * c];
        *h = row
            .iter()
            .zip(pooled.iter())
            .map(|(w, p)| w * p)
            .sum::<f64>()
            .max(0.0);
    }
    let gate: Vec<f64> = (0..c)
        .map(|ch| {
            let row = &se.w2[ch * se.reduced..(ch + 1) * se.reduced];
            sigmoid(
                row.iter()
                    .zip(hidden.iter())
                    .map(|(w, h)| w * h)
                    .sum::<f64>(),
            )
        })
        .collect();
    let mut out = features.to_vec();
    for ch in 0..c {
        let g = gate[ch];
        for v in out[ch * hw..(ch + 1) * hw].iter_mut() {
            *v *= g;
        }
    }
    (
        out,
        SeCache {
            pooled,
            hidden,
            gate,
        },
    )
}

/// Backward through the SE gate. `features` is the gate's input map; the
/// returned gradient covers both the gated-value path and the pooled path.
fn se_backward(
    se: &SeParams,
    features: &[f64],
    hw: usize,
    cache: &SeCache,
    d_out: &[f64],
    g_w1: &mut [f64],
    g_w2: &mut [f64],
) -> Vec<f64> {
    let c = se.channels;
    let inv = 1.0 / hw as f64;
    let mut d_in: Vec<f64> = vec![0.0; features.len()];
    let mut d_gate = vec![0.0f64; c];
    for ch in 0..c {
        let g = cache.gate[ch];
        let f = &features[ch * hw..(ch + 1) * hw];
        let d = &d_out[ch * hw..(ch + 1) * hw];
        let di = &mut d_in[ch * hw..(ch + 1) * hw];
        let mut acc = 0.0;
        for k in 0..hw {
            acc += d[k] * f[k];
            di[k] = d[k] * g;
        }
        d_gate[ch] = acc;
    }
    // Through the sigmoid onto w2 and the hidden layer.
    let mut d_hidden = vec![0.0f64; se.reduced];
    for ch in 0..c {
        let dv = d_gate[ch] * cache.gate[ch] * (1.0 - cache.gate[ch]);
        let row = &se.w2[ch * se.reduced..(ch + 1) * se.reduced];
        let g_row = &mut g_w2[ch * se.reduced..(ch + 1) * se.reduced];
        for j in 0..se.reduced {
            g_row[j] += dv * cache.hidden[j];
            d_hidden[j] += dv * row[j];
        }
    }
    // Through the hidden relu onto w1 and the pooled vector.
    let mut d_pooled = vec![0.0f64; c];
    for j in 0..se.reduced {
        if cache.hidden[j] > 0.0 {
            let dh = d_hidden[j];
            let row = &se.w1[j * c..(j + 1) * c];
            let g_row = &mut g_w1[j * c..(j + 1) * c];
            for ch in 0..c {
                g_row[ch] += dh * cache.pooled[ch];
                d_pooled[ch] += dh * row[ch];
            }
        }
    }
    // Pooled path broadcasts back uniformly over the spatial cells.
    for ch in 0..c {
        let dp = d_pooled[ch] * inv;
        for v in d_in[ch * hw..(ch + 1) * hw].iter_mut() {
            *v += dp;
        }
    }
    d_in
}

/// Standalone SE gate: out = sigmoid(W2·relu(W1·avgpool(f))) ⊙ f.
///
/// `features` is a C-channel map with `hw` cells per channel.
pub fn se_block(se: &SeParams, features: &[f64], hw: usize) -> Result<Vec<f64>, ModelError> {
    if features.len() != se.channels * hw {
        return Err(ModelError::ShapeMismatch {
            what: "se_block features",
            expected: se.channels * hw,
            got: features.len(),
        });
    }
    Ok(se_forward(se, features, hw).0)
}

fn run_forward(
    params: &ModelParams,
    input: &ModelInput,
    plan: DropoutPlan<'_>,
) -> Result<(f64, ForwardTrace), ModelError> {
    let cfg = &params.config;
    if input.side != cfg.input_size {
        return Err(ModelError::ShapeMismatch {
            what: "input side",
            expected: cfg.input_size,
            got: input.side,
        });
    }
    if input.values.len() != input.side * input.side {
        return Err(ModelError::ShapeMismatch {
            what: "input length",
            expected: input.side * input.side,
            got: input.values.len(),
        });
    }
    let sides = cfg.stage_sides();

    let (mut h1, s1) = conv_forward(&params.conv1, &input.values, cfg.input_size);
    relu_inplace(&mut h1);
    check_finite("conv stage 1", &h1)?;

    let (mut h2, s2_side) = conv_forward(&params.conv2, &h1, s1);
    relu_inplace(&mut h2);
    check_finite("conv stage 2", &h2)?;
    let (s2, se2_cache) = se_forward(&params.se2, &h2, s2_side * s2_side);

    let (mut h3, s3_side) = conv_forward(&params.conv3, &s2, s2_side);
    relu_inplace(&mut h3);
    check_finite("conv stage 3", &h3)?;
    let (s3, se3_cache) = se_forward(&params.se3, &h3, s3_side * s3_side);
    debug_assert_eq!([s1, s2_side, s3_side], sides);

    let hw3 = s3_side * s3_side;
    let inv = 1.0 / hw3 as f64;
    let pooled: Vec<f64> = (0..cfg.channels[2])
        .map(|ch| s3[ch * hw3..(ch + 1) * hw3].iter().sum::<f64>() * inv)
        .collect();

    let masks = match &plan {
        DropoutPlan::Eval => DropoutMasks::all_kept(cfg),
        DropoutPlan::Replay(m) => (*m).clone(),
    };
    // Eval mode is the identity: no scaling. Train (replayed) masks use
    // inverted dropout so kept units are scaled by 1/(1-p).
    let keep_scale = match plan {
        DropoutPlan::Eval => 1.0,
        DropoutPlan::Replay(_) => 1.0 / (1.0 - cfg.dropout),
    };

    let (z, head_trace) = match &params.head {
        HeadParams::Rrh {
            fc1,
            fc2,
            fc3,
            gamma: _,
            beta: _,
        } => {
            let mut t1 = Vec::new();
            fc1.apply(&pooled, &mut t1);
            relu_inplace(&mut t1);
            let r1: Vec<f64> = pooled
                .iter()
                .zip(t1.iter().zip(masks.stage1.iter()))
                .map(|(p, (t, &keep))| p + if keep { t * keep_scale } else { 0.0 })
                .collect();
            let mut t2 = Vec::new();
            fc2.apply(&r1, &mut t2);
            relu_inplace(&mut t2);
            let d2: Vec<f64> = t2
                .iter()
                .zip(masks.stage2.iter())
                .map(|(t, &keep)| if keep { t * keep_scale } else { 0.0 })
                .collect();
            let mut out = Vec::new();
            fc3.apply(&d2, &mut out);
            (out[0], HeadTrace::Rrh { t1, r1, t2, d2 })
        }
        HeadParams::SingleFc { fc } => {
            let mut out = Vec::new();
            fc.apply(&pooled, &mut out);
            (out[0], HeadTrace::SingleFc)
        }
    };

    let prediction = match &params.head {
        HeadParams::Rrh { gamma, beta, .. } => gamma * z + beta,
        HeadParams::SingleFc { .. } => z,
    };
    if !prediction.is_finite() {
        return Err(ModelError::NonFinite { stage: "head output" });
    }

    Ok((
        prediction,
        ForwardTrace {
            h1,
            h2,
            se2_cache,
            s2,
            h3,
            se3_cache,
            s3,
            pooled,
            head: head_trace,
            masks,
            z,
            prediction,
        },
    ))
}

/// Eval-mode forward: dropout disabled, pure function of (params, input).
pub fn predict(params: &ModelParams, input: &ModelInput) -> Result<f64, ModelError> {
    run_forward(params, input, DropoutPlan::Eval).map(|(y, _)| y)
}

/// Train-mode forward: samples dropout masks from `rng`, returns the trace.
pub fn forward_train(
    params: &ModelParams,
    input: &ModelInput,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, ForwardTrace), ModelError> {
    let masks = DropoutMasks::sample(&params.config, rng);
    run_forward(params, input, DropoutPlan::Replay(&masks))
}

/// Train-mode forward under fixed dropout masks; the replay hook for
/// finite-difference oracles.
pub fn forward_with_masks(
    params: &ModelParams,
    input: &ModelInput,
    masks: &DropoutMasks,
) -> Result<f64, ModelError> {
    run_forward(params, input, DropoutPlan::Replay(masks)).map(|(y, _)| y)
}

/// Backprop one sample given dL/dŷ, accumulating into `grads`.
fn backward_sample(
    params: &ModelParams,
    input: &ModelInput,
    trace: &ForwardTrace,
    d_pred: f64,
    grads: &mut ModelParams,
) {
    let cfg = &params.config;
    let sides = cfg.stage_sides();
    let keep_scale = 1.0 / (1.0 - cfg.dropout);

    // Head.
    let mut d_pooled = vec![0.0f64; cfg.feature_dim()];
    match (&params.head, &trace.head, &mut grads.head) {
        (
            HeadParams::Rrh { fc1, fc2, fc3, gamma, .. },
            HeadTrace::Rrh { t1, r1, t2, d2 },
            HeadParams::Rrh {
                fc1: g_fc1,
                fc2: g_fc2,
                fc3: g_fc3,
                gamma: g_gamma,
                beta: g_beta,
            },
        ) => {
            *g_gamma += d_pred * trace.z;
            *g_beta += d_pred;
            let dz = d_pred * gamma;

            // fc3: z = W3·d2 + b3.
            let mut d_d2 = vec![0.0f64; fc3.in_dim];
            g_fc3.bias[0] += dz;
            for j in 0..fc3.in_dim {
                g_fc3.weights[j] += dz * d2[j];
                d_d2[j] = dz * fc3.weights[j];
            }
            // Dropout 2 + relu 2.
            let mut d_t2pre = vec![0.0f64; fc2.out_dim];
            for j in 0..fc2.out_dim {
                if trace.masks.stage2[j] && t2[j] > 0.0 {
                    d_t2pre[j] = d_d2[j] * keep_scale;
                }
            }
            // fc2: t2pre = W2·r1 + b2.
            let mut d_r1 = vec![0.0f64; fc2.in_dim];
            for (o, &g) in d_t2pre.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                g_fc2.bias[o] += g;
                let row = &fc2.weights[o * fc2.in_dim..(o + 1) * fc2.in_dim];
                let g_row = &mut g_fc2.weights[o * fc2.in_dim..(o + 1) * fc2.in_dim];
                for j in 0..fc2.in_dim {
                    g_row[j] += g * r1[j];
                    d_r1[j] += g * row[j];
                }
            }
            // Residual skip: r1 = pooled + dropout(relu(fc1(pooled))).
            for (dst, d) in d_pooled.iter_mut().zip(d_r1.iter()) {
                *dst += d;
            }
            let mut d_t1pre = vec![0.0f64; fc1.out_dim];
            for j in 0..fc1.out_dim {
                if trace.masks.stage1[j] && t1[j] > 0.0 {
                    d_t1pre[j] = d_r1[j] * keep_scale;
                }
            }
            for (o, &g) in d_t1pre.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                g_fc1.bias[o] += g;
                let row = &fc1.weights[o * fc1.in_dim..(o + 1) * fc1.in_dim];
                let g_row = &mut g_fc1.weights[o * fc1.in_dim..(o + 1) * fc1.in_dim];
                for j in 0..fc1.in_dim {
                    g_row[j] += g * trace.pooled[j];
                    d_pooled[j] += g * row[j];
                }
            }
        }
        (HeadParams::SingleFc { fc }, HeadTrace::SingleFc, HeadParams::SingleFc { fc: g_fc }) => {
            let dz = d_pred;
            g_fc.bias[0] += dz;
            for (j, dp) in d_pooled.iter_mut().enumerate() {
                g_fc.weights[j] += dz * trace.pooled[j];
                *dp += dz * fc.weights[j];
            }
        }
        _ => unreachable!("head params/trace/grads kinds always agree"),
    }

    // GAP broadcast.
    let hw3 = sides[2] * sides[2];
    let inv3 = 1.0 / hw3 as f64;
    let mut d_s3 = vec![0.0f64; trace.s3.len()];
    for ch in 0..cfg.channels[2] {
        let dp = d_pooled[ch] * inv3;
        for v in d_s3[ch * hw3..(ch + 1) * hw3].iter_mut() {
            *v = dp;
        }
    }

    // SE3 → relu3 → conv3.
    let mut d_h3 = se_backward(
        &params.se3,
        &trace.h3,
        hw3,
        &trace.se3_cache,
        &d_s3,
        &mut grads.se3.w1,
        &mut grads.se3.w2,
    );
    for (d, h) in d_h3.iter_mut().zip(trace.h3.iter()) {
        if *h <= 0.0 {
            *d = 0.0;
        }
    }
    let d_s2 = conv_backward(
        &params.conv3,
        &trace.s2,
        sides[1],
        &d_h3,
        sides[2],
        &mut grads.conv3.weights,
        &mut grads.conv3.bias,
    );

    // SE2 → relu2 → conv2.
    let hw2 = sides[1] * sides[1];
    let mut d_h2 = se_backward(
        &params.se2,
        &trace.h2,
        hw2,
        &trace.se2_cache,
        &d_s2,
        &mut grads.se2.w1,
        &mut grads.se2.w2,
    );
    for (d, h) in d_h2.iter_mut().zip(trace.h2.iter()) {
        if *h <= 0.0 {
            *d = 0.0;
        }
    }
    let mut d_h1 = conv_backward(
        &params.conv2,
        &trace.h1,
        sides[0],
        &d_h2,
        sides[1],
        &mut grads.conv2.weights,
        &mut grads.conv2.bias,
    );

    // relu1 → conv1.
    for (d, h) in d_h1.iter_mut().zip(trace.h1.iter()) {
        if *h <= 0.0 {
            *d = 0.0;
        }
    }
    let _ = conv_backward(
        &params.conv1,
        &input.values,
        cfg.input_size,
        &d_h1,
        sides[0],
        &mut grads.conv1.weights,
        &mut grads.conv1.bias,
    );
}

/// Exact gradients of the hybrid loss λ·MSE + (1−λ)·MAE over a batch.
///
/// Returns (loss, gradients, per-sample dropout masks). The MAE term uses
/// the subgradient sign with sign(0) = 0. Masks are drawn from `rng` in
/// sample order and recorded so the loss is replayable under
/// [`forward_with_masks`].
pub fn gradients(
    params: &ModelParams,
    batch: &[(&ModelInput, f64)],
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, ModelParams, Vec<DropoutMasks>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::InvalidParam {
            name: "batch",
            reason: "must be non-empty".into(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ModelError::InvalidParam {
            name: "lambda",
            reason: format!("must be in [0, 1], got {lambda}"),
        });
    }
    let n = batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut masks = Vec::with_capacity(batch.len());
    let mut loss = 0.0f64;
    for &(input, target) in batch {
        let (pred, trace) = forward_train(params, input, rng)?;
        let residual = pred - target;
        loss += (lambda * residual * residual + (1.0 - lambda) * residual.abs()) / n;
        let sign = if residual > 0.0 {
            1.0
        } else if residual < 0.0 {
            -1.0
        } else {
            0.0
        };
        let d_pred = (2.0 * lambda * residual + (1.0 - lambda) * sign) / n;
        backward_sample(params, input, &trace, d_pred, &mut grads);
        masks.push(trace.masks);
    }
    if !loss.is_finite() {
        return Err(ModelError::NonFinite { stage: "batch loss" });
    }
    Ok((loss, grads, masks))
}

/// A feature extractor the regression head can sit on.
///
/// The built-in SE encoder implements this; a higher-capacity pretrained
/// backbone can be plugged in at inference by implementing it too.
pub trait Backbone {
    fn feature_dim(&self) -> usize;
    fn extract(&self, input: &ModelInput) -> Result<Vec<f64>, ModelError>;
}

/// The built-in encoder viewed as a [`Backbone`].
pub struct SeEncoder<'a>(pub &'a ModelParams);

impl Backbone for SeEncoder<'_> {
    fn feature_dim(&self) -> usize {
        self.0.config.feature_dim()
    }

    fn extract(&self, input: &ModelInput) -> Result<Vec<f64>, ModelError> {
        let (_, trace) = run_forward(self.0, input, DropoutPlan::Eval)?;
        Ok(trace.pooled)
    }
}

/// Run any backbone's features through a regression head (eval mode).
pub fn predict_with_backbone<B: Backbone>(
    backbone: &B,
    head: &HeadParams,
    input: &ModelInput,
) -> Result<f64, ModelError> {
    let features = backbone.extract(input)?;
    let expected = match head {
        HeadParams::Rrh { fc1, .. } => fc1.in_dim,
        HeadParams::SingleFc { fc } => fc.in_dim,
    };
    if features.len() != expected {
        return Err(ModelError::ShapeMismatch {
            what: "backbone features",
            expected,
            got: features.len(),
        });
    }
    match head {
        HeadParams::Rrh {
            fc1,
            fc2,
            fc3,
            gamma,
            beta,
        } => {
            let mut t1 = Vec::new();
            fc1.apply(&features, &mut t1);
            relu_inplace(&mut t1);
            let r1: Vec<f64> = features.iter().zip(t1.iter()).map(|(p, t)| p + t).collect();
            let mut t2 = Vec::new();
            fc2.apply(&r1, &mut t2);
            relu_inplace(&mut t2);
            let mut out = Vec::new();
            fc3.apply(&t2, &mut out);
            Ok(gamma * out[0] + beta)
        }
        HeadParams::SingleFc { fc } => {
            let mut out = Vec::new();
            fc.apply(&features, &mut out);
            Ok(out[0])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_size: 8,
            channels: [2, 4, 8],
            se_reduction: 2,
            rrh_hidden: 4,
            dropout: 0.2,
            head: HeadKind::Rrh,
        }
    }

    fn ramp_input(side: usize, scale: f64) -> ModelInput {
        let n = side * side;
        ModelInput {
            side,
            values: (0..n)
                .map(|i| scale * (2.0 * i as f64 / (n - 1) as f64 - 1.0))
                .collect(),
        }
    }

    #[test]
    fn init_is_deterministic_and_well_formed() {
        let cfg = tiny_config();
        let a = init_params(&cfg, 5, None).unwrap();
        let b = init_params(&cfg, 5, None).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg, 6, None).unwrap();
        assert_ne!(a, c);

        match &a.head {
            HeadParams::Rrh { gamma, beta, .. } => {
                assert_eq!(*gamma, 1.0);
                assert_eq!(*beta, 0.0);
            }
            _ => panic!("expected RRH head"),
        }
        let with_mean = init_params(&cfg, 5, Some(8.8e-4)).unwrap();
        match &with_mean.head {
            HeadParams::Rrh { beta, .. } => assert_eq!(*beta, 8.8e-4),
            _ => unreachable!(),
        }

        // Every weight tensor finite with nonzero variance.
        let flat = a.flatten();
        assert!(flat.iter().all(|v| v.is_finite()));
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        let var = flat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / flat.len() as f64;
        assert!(var > 0.0);
    }

    #[test]
    fn flatten_round_trips() {
        let cfg = tiny_config();
        let a = init_params(&cfg, 11, Some(1e-3)).unwrap();
        let flat = a.flatten();
        assert_eq!(flat.len(), a.param_count());
        let mut b = init_params(&cfg, 99, None).unwrap();
        b.assign_from_flat(&flat).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flat_slot_agrees_with_flatten_order() {
        for head in [HeadKind::Rrh, HeadKind::SingleFc] {
            let cfg = ModelConfig { head, ..tiny_config() };
            let mut p = init_params(&cfg, 4, Some(0.5)).unwrap();
            let flat = p.flatten();
            for (k, &expected) in flat.iter().enumerate() {
                assert_eq!(*p.flat_slot_mut(k).unwrap(), expected, "index {k}");
            }
            assert!(p.flat_slot_mut(flat.len()).is_none());

            // Poking through the slot shows up in flatten.
            *p.flat_slot_mut(3).unwrap() = 42.0;
            assert_eq!(p.flatten()[3], 42.0);
        }
    }

    #[test]
    fn se_block_zero_weights_gate_at_half() {
        let se = SeParams {
            channels: 3,
            reduced: 1,
            w1: vec![0.0; 3],
            w2: vec![0.0; 3],
        };
        let features = vec![1.0, -2.0, 3.0, 4.0, 0.5, -0.25];
        let out = se_block(&se, &features, 2).unwrap();
        for (o, f) in out.iter().zip(features.iter()) {
            assert!((o - 0.5 * f).abs() < 1e-15);
        }
    }

    #[test]
    fn se_block_gate_bounds_magnitude() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 3, None).unwrap();
        let features: Vec<f64> = (0..params.se2.channels * 4)
            .map(|i| (i as f64 * 0.37).sin() * 2.0)
            .collect();
        let out = se_block(&params.se2, &features, 4).unwrap();
        for (o, f) in out.iter().zip(features.iter()) {
            assert!(o.abs() <= f.abs() + 1e-15);
        }
    }

    #[test]
    fn se_block_zero_input_gives_zero_output() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 3, None).unwrap();
        let features = vec![0.0; params.se3.channels * 4];
        let out = se_block(&params.se3, &features, 4).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn se_block_rejects_shape_mismatch() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 3, None).unwrap();
        assert!(matches!(
            se_block(&params.se2, &[0.0; 7], 2),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn eval_forward_is_deterministic_scalar() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 21, None).unwrap();
        let input = ramp_input(8, 1.0);
        let y1 = predict(&params, &input).unwrap();
        let y2 = predict(&params, &input).unwrap();
        assert_eq!(y1, y2);
        assert!(y1.is_finite());
    }

    #[test]
    fn output_affine_scales_and_shifts() {
        let cfg = tiny_config();
        let base = init_params(&cfg, 33, None).unwrap();
        let input = ramp_input(8, 0.7);
        let y1 = predict(&base, &input).unwrap();

        let mut scaled = base.clone();
        match &mut scaled.head {
            HeadParams::Rrh { gamma, beta, .. } => {
                *gamma = 2.0;
                *beta = 0.1;
            }
            _ => unreachable!(),
        }
        let y2 = predict(&scaled, &input).unwrap();
        assert!((y2 - (2.0 * y1 + 0.1)).abs() < 1e-12, "{y2} vs {}", 2.0 * y1 + 0.1);
    }

    #[test]
    fn zeroed_stage1_makes_head_stage1_identity() {
        let cfg = tiny_config();
        let mut params = init_params(&cfg, 44, None).unwrap();
        match &mut params.head {
            HeadParams::Rrh { fc1, .. } => {
                fc1.weights.iter_mut().for_each(|v| *v = 0.0);
                fc1.bias.iter_mut().for_each(|v| *v = 0.0);
            }
            _ => unreachable!(),
        }
        let input = ramp_input(8, 0.5);
        let y = predict(&params, &input).unwrap();

        // Expected: head applied to the pooled vector with stage 1 skipped.
        let pooled = SeEncoder(&params).extract(&input).unwrap();
        let (fc2, fc3, gamma, beta) = match &params.head {
            HeadParams::Rrh { fc2, fc3, gamma, beta, .. } => (fc2, fc3, gamma, beta),
            _ => unreachable!(),
        };
        let mut t2 = Vec::new();
        fc2.apply(&pooled, &mut t2);
        relu_inplace(&mut t2);
        let mut out = Vec::new();
        fc3.apply(&t2, &mut out);
        let expected = gamma * out[0] + beta;
        assert!((y - expected).abs() < 1e-12, "{y} vs {expected}");
    }

    #[test]
    fn single_fc_head_is_linear_readout_of_features() {
        let cfg = ModelConfig {
            head: HeadKind::SingleFc,
            ..tiny_config()
        };
        let params = init_params(&cfg, 17, None).unwrap();
        let input = ramp_input(8, 0.9);
        let y = predict(&params, &input).unwrap();
        let pooled = SeEncoder(&params).extract(&input).unwrap();
        let fc = match &params.head {
            HeadParams::SingleFc { fc } => fc,
            _ => unreachable!(),
        };
        let expected: f64 =
            fc.weights.iter().zip(pooled.iter()).map(|(w, p)| w * p).sum::<f64>() + fc.bias[0];
        assert!((y - expected).abs() < 1e-12);
    }

    #[test]
    fn nonfinite_parameters_are_reported() {
        let cfg = tiny_config();
        let mut params = init_params(&cfg, 2, None).unwrap();
        params.conv2.weights[0] = f64::NAN;
        let input = ramp_input(8, 1.0);
        assert!(matches!(
            predict(&params, &input),
            Err(ModelError::NonFinite { .. })
        ));
    }

    /// Central finite differences against the analytic gradients, every
    /// parameter component, dropout masks frozen.
    fn finite_difference_check(head: HeadKind, lambda: f64) {
        let cfg = ModelConfig { head, ..tiny_config() };
        let params = init_params(&cfg, 7, Some(0.9)).unwrap();
        let inputs = [ramp_input(8, 1.0), ramp_input(8, -0.6)];
        let batch: Vec<(&ModelInput, f64)> = vec![(&inputs[0], 0.4), (&inputs[1], 1.3)];

        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let (loss, grads, masks) = gradients(&params, &batch, lambda, &mut rng).unwrap();
        assert!(loss.is_finite());

        let loss_at = |flat: &[f64]| -> f64 {
            let mut p = params.clone();
            p.assign_from_flat(flat).unwrap();
            let n = batch.len() as f64;
            batch
                .iter()
                .zip(masks.iter())
                .map(|(&(input, target), m)| {
                    let pred = forward_with_masks(&p, input, m).unwrap();
                    let r = pred - target;
                    (lambda * r * r + (1.0 - lambda) * r.abs()) / n
                })
                .sum()
        };

        let flat = params.flatten();
        let flat_grads = grads.flatten();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for k in 0..flat.len() {
            let mut plus = flat.clone();
            plus[k] += h;
            let mut minus = flat.clone();
            minus[k] -= h;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let analytic = flat_grads[k];
            let denom = analytic.abs().max(numeric.abs());
            if denom > 1e-7 {
                let rel = (analytic - numeric).abs() / denom;
                worst = worst.max(rel);
                assert!(
                    rel < 1e-4,
                    "param {k}: analytic {analytic} vs numeric {numeric} (rel {rel})"
                );
            } else {
                assert!(
                    (analytic - numeric).abs() < 1e-9,
                    "param {k}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_rrh() {
        finite_difference_check(HeadKind::Rrh, 0.5);
    }

    #[test]
    fn gradients_match_finite_differences_single_fc() {
        finite_difference_check(HeadKind::SingleFc, 0.5);
    }

    #[test]
    fn zero_residual_zeroes_affine_gradients() {
        let cfg = ModelConfig {
            dropout: 0.0,
            ..tiny_config()
        };
        let params = init_params(&cfg, 13, None).unwrap();
        let input = ramp_input(8, 0.8);
        // With dropout 0 the train forward equals eval, so targeting the
        // eval prediction gives an exactly-zero residual.
        let target = predict(&params, &input).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = vec![(&input, target)];
        let (loss, grads, _) = gradients(&params, &batch, 0.5, &mut rng).unwrap();
        assert_eq!(loss, 0.0);
        match &grads.head {
            HeadParams::Rrh { gamma, beta, .. } => {
                assert_eq!(*gamma, 0.0);
                assert_eq!(*beta, 0.0);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn lambda_one_equals_pure_mse_gradients() {
        // Independent oracle: central differences of a test-side MSE.
        let cfg = ModelConfig {
            dropout: 0.0,
            ..tiny_config()
        };
        let params = init_params(&cfg, 29, None).unwrap();
        let inputs = [ramp_input(8, 0.4), ramp_input(8, -1.0)];
        let batch: Vec<(&ModelInput, f64)> = vec![(&inputs[0], 1.0), (&inputs[1], 0.3)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, grads, _) = gradients(&params, &batch, 1.0, &mut rng).unwrap();

        let mse = |flat: &[f64]| -> f64 {
            let mut p = params.clone();
            p.assign_from_flat(flat).unwrap();
            batch
                .iter()
                .map(|&(input, target)| {
                    let r = predict(&p, input).unwrap() - target;
                    r * r
                })
                .sum::<f64>()
                / batch.len() as f64
        };
        let flat = params.flatten();
        let flat_grads = grads.flatten();
        let h = 1e-4;
        for k in (0..flat.len()).step_by(7) {
            let mut plus = flat.clone();
            plus[k] += h;
            let mut minus = flat.clone();
            minus[k] -= h;
            let numeric = (mse(&plus) - mse(&minus)) / (2.0 * h);
            let denom = flat_grads[k].abs().max(numeric.abs()).max(1e-7);
            assert!(
                (flat_grads[k] - numeric).abs() / denom < 1e-4,
                "param {k}: {} vs {numeric}",
                flat_grads[k]
            );
        }
    }

    #[test]
    fn checkpoint_round_trips_through_json() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 77, Some(1e-3)).unwrap();
        let ckpt = Checkpoint::new(77, params.clone());
        let json = serde_json::to_string(&ckpt).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.seed, 77);
        assert_eq!(back.format_version, CHECKPOINT_FORMAT_VERSION);
    }

    #[test]
    fn constant_backbone_plugs_into_head() {
        struct Flat(usize);
        impl Backbone for Flat {
            fn feature_dim(&self) -> usize {
                self.0
            }
            fn extract(&self, _input: &ModelInput) -> Result<Vec<f64>, ModelError> {
                Ok(vec![0.5; self.0])
            }
        }
        let cfg = tiny_config();
        let params = init_params(&cfg, 55, None).unwrap();
        let input = ramp_input(8, 1.0);
        let y = predict_with_backbone(&Flat(cfg.feature_dim()), &params.head, &input).unwrap();
        assert!(y.is_finite());

        let wrong = Flat(cfg.feature_dim() + 1);
        assert!(matches!(
            predict_with_backbone(&wrong, &params.head, &input),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }
}
