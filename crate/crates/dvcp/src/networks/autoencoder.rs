use dvcp_autograd::{ParamId, ParamStore, Tape, Var};
use rand::Rng;

use super::{Conv2d, ConvTranspose2d, NetworkConfig, UpsamplerMode};
use crate::error::{Error, Result};

/// Which signal an autoencoder compresses; decides its channel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentRole {
    /// Motion-vector field, 2 channels.
    Mv,
    /// Frame residual, 3 channels.
    Residual,
}

impl LatentRole {
    pub fn io_channels(&self) -> usize {
        match self {
            LatentRole::Mv => 2,
            LatentRole::Residual => 3,
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            LatentRole::Mv => 0,
            LatentRole::Residual => 1,
        }
    }
}

enum Upsampler {
    Deconv(ConvTranspose2d),
    Interp { nearest: bool, conv: Conv2d },
}

/// Analysis/synthesis pair: `levels` stride-2 convolutions down to the
/// latent, mirrored by `levels` upsampling stages back to full resolution.
/// ReLU follows every stage except the last of each half.
pub struct Autoencoder {
    role: LatentRole,
    levels: usize,
    enc: Vec<Conv2d>,
    dec: Vec<Upsampler>,
}

impl Autoencoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        role: LatentRole,
        cfg: &NetworkConfig,
    ) -> Self {
        let io = role.io_channels();
        let base = cfg.base_channels;
        let latent = cfg.latent_channels;
        let mut enc = Vec::new();
        for l in 0..cfg.levels {
            let cin = if l == 0 { io } else { base };
            let cout = if l == cfg.levels - 1 { latent } else { base };
            enc.push(Conv2d::new(
                store,
                rng,
                &format!("{name}.enc{l}"),
                cin,
                cout,
                3,
                2,
            ));
        }
        let mut dec = Vec::new();
        for l in 0..cfg.levels {
            let cin = if l == 0 { latent } else { base };
            let cout = if l == cfg.levels - 1 { io } else { base };
            let stage = match cfg.upsampler_mode {
                UpsamplerMode::Deconv => Upsampler::Deconv(ConvTranspose2d::new(
                    store,
                    rng,
                    &format!("{name}.dec{l}"),
                    cin,
                    cout,
                    3,
                    2,
                )),
                UpsamplerMode::NnConv => Upsampler::Interp {
                    nearest: true,
                    conv: Conv2d::new(store, rng, &format!("{name}.dec{l}"), cin, cout, 3, 1),
                },
                UpsamplerMode::BilinearConv => Upsampler::Interp {
                    nearest: false,
                    conv: Conv2d::new(store, rng, &format!("{name}.dec{l}"), cin, cout, 3, 1),
                },
            };
            dec.push(stage);
        }
        Self {
            role,
            levels: cfg.levels,
            enc,
            dec,
        }
    }

    pub fn role(&self) -> LatentRole {
        self.role
    }

    /// Downsample `x` to the latent grid. Errors when the spatial size is
    /// not divisible by 2^levels.
    pub fn encode(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = t.value(x).shape().to_vec();
        let div = 1usize << self.levels;
        if shape[2] % div != 0 || shape[3] % div != 0 {
            return Err(Error::Indivisible {
                h: shape[2],
                w: shape[3],
                divisor: div,
            });
        }
        let mut h = x;
        for (l, conv) in self.enc.iter().enumerate() {
            h = conv.forward(t, store, h);
            if l + 1 < self.enc.len() {
                h = t.relu(h);
            }
        }
        Ok(h)
    }

    /// Reconstruct from a latent back to the original resolution.
    pub fn generate(&self, t: &mut Tape, store: &ParamStore, latent: Var) -> Var {
        let mut h = latent;
        for (l, stage) in self.dec.iter().enumerate() {
            h = match stage {
                Upsampler::Deconv(deconv) => deconv.forward(t, store, h),
                Upsampler::Interp { nearest, conv } => {
                    let up = if *nearest {
                        t.upsample_nearest(h, 2)
                    } else {
                        t.upsample_bilinear(h, 2)
                    };
                    conv.forward(t, store, up)
                }
            };
            if l + 1 < self.dec.len() {
                h = t.relu(h);
            }
        }
        h
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.enc.iter().flat_map(|c| c.params()).collect()
    }

    pub fn generator_params(&self) -> Vec<ParamId> {
        self.dec
            .iter()
            .flat_map(|s| match s {
                Upsampler::Deconv(d) => d.params(),
                Upsampler::Interp { conv, .. } => conv.params(),
            })
            .collect()
    }
}
