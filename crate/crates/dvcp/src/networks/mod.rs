//! All learnable stages: optical-flow estimator, warping, MV/residual
//! autoencoders with swappable upsamplers, motion compensation, the
//! discriminator, and pluggable perceptual feature extractors.

mod autoencoder;
mod discriminator;
mod features;
mod flow;

pub use autoencoder::{Autoencoder, LatentRole};
pub use discriminator::Discriminator;
pub use features::FeatureExtractor;
pub use flow::FlowNet;

use dvcp_autograd::{ParamId, ParamStore, Tape, Var};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How generator networks restore spatial resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsamplerMode {
    /// Strided transposed convolution (the artifact-prone baseline).
    Deconv,
    /// Nearest-neighbor interpolation followed by a stride-1 convolution.
    NnConv,
    /// Bilinear interpolation followed by a stride-1 convolution.
    BilinearConv,
}

/// Widths and depths for every network in the codec. `levels` is the number
/// of stride-2 stages in the MV/residual autoencoders; four reproduces the
/// reference design, smaller values keep desk-scale runs fast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub latent_channels: usize,
    pub levels: usize,
    pub upsampler_mode: UpsamplerMode,
    /// LeakyReLU slope in the discriminator.
    pub negative_slope: f32,
    #[serde(default = "default_flow_levels")]
    pub flow_levels: usize,
    #[serde(default = "default_flow_channels")]
    pub flow_channels: usize,
    #[serde(default = "default_disc_levels")]
    pub disc_levels: usize,
}

fn default_flow_levels() -> usize {
    2
}

fn default_flow_channels() -> usize {
    16
}

fn default_disc_levels() -> usize {
    3
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            latent_channels: 128,
            levels: 4,
            upsampler_mode: UpsamplerMode::NnConv,
            negative_slope: 0.2,
            flow_levels: 2,
            flow_channels: 16,
            disc_levels: 3,
        }
    }
}

impl NetworkConfig {
    /// Small nets for fast CPU runs and tests.
    pub fn desk_scale() -> Self {
        Self {
            base_channels: 16,
            latent_channels: 32,
            levels: 2,
            upsampler_mode: UpsamplerMode::NnConv,
            negative_slope: 0.2,
            flow_levels: 2,
            flow_channels: 12,
            disc_levels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config {
                key: "network.levels".into(),
                message: "must be >= 1".into(),
            });
        }
        if self.base_channels == 0 || self.latent_channels == 0 {
            return Err(Error::Config {
                key: "network.base_channels/latent_channels".into(),
                message: "must be >= 1".into(),
            });
        }
        if self.flow_levels == 0 || self.disc_levels == 0 {
            return Err(Error::Config {
                key: "network.flow_levels/disc_levels".into(),
                message: "must be >= 1".into(),
            });
        }
        Ok(())
    }

    /// Spatial divisor a frame must satisfy before encoding.
    pub fn spatial_divisor(&self) -> usize {
        let ae = 1usize << self.levels;
        let flow = 1usize << (self.flow_levels - 1);
        let disc = 1usize << self.disc_levels;
        ae.max(flow).max(disc)
    }
}

/// A per-pixel displacement field (dx, dy), stored as (N, 2, H, W).
#[derive(Debug, Clone)]
pub struct FlowField(pub ArrayD<f32>);

/// Plain convolution layer wrapper owning its parameter handles.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let weight = store.register_kaiming(
            &format!("{name}.w"),
            &[cout, cin, kernel, kernel],
            cin * kernel * kernel,
            rng,
        );
        let bias = store.register_zeros(&format!("{name}.b"), &[cout]);
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = t.param(store, self.weight);
        let b = t.param(store, self.bias);
        t.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Transposed convolution layer (weight layout Cin, Cout, k, k).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let weight = store.register_kaiming(
            &format!("{name}.w"),
            &[cin, cout, kernel, kernel],
            cin * kernel * kernel,
            rng,
        );
        let bias = store.register_zeros(&format!("{name}.b"), &[cout]);
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
            out_pad: stride - 1,
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = t.param(store, self.weight);
        let b = t.param(store, self.bias);
        t.conv_transpose2d(x, w, Some(b), self.stride, self.pad, self.out_pad)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Per-channel affine normalization layer.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.register(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels])));
        let beta = store.register_zeros(&format!("{name}.beta"), &[channels]);
        Self { gamma, beta }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = t.param(store, self.gamma);
        let b = t.param(store, self.beta);
        t.batch_norm(x, g, b, 1e-5)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

pub(crate) fn check_same_shape(context: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            a: format!("{a:?}"),
            b: format!("{b:?}"),
        });
    }
    Ok(())
}

/// Backward-warp a frame tensor by a flow field (see `Tape::warp` for the
/// sign convention). Public entry point with shape validation.
pub fn warp(t: &mut Tape, frame: Var, flow: Var) -> Result<Var> {
    let fs = t.value(frame).shape().to_vec();
    let ls = t.value(flow).shape().to_vec();
    if fs.len() != 4 || ls.len() != 4 || fs[0] != ls[0] || ls[1] != 2 || fs[2..] != ls[2..] {
        return Err(Error::ShapeMismatch {
            context: "warp(frame, flow)".into(),
            a: format!("{fs:?}"),
            b: format!("{ls:?}"),
        });
    }
    Ok(t.warp(frame, flow))
}

pub(crate) fn bias_array(store: &ParamStore, id: ParamId) -> Array1<f32> {
    store
        .value(id)
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("bias is 1-d")
        .to_owned()
}
