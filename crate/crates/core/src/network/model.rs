//! Siamese backbone, per-scale correlation, top-down fusion and the heads.

use alloc::vec::Vec;

use super::params::ParamSpec;
use super::ModelConfig;
use crate::association;
use crate::density::LEVELS;
use crate::localization::{self, FusedMaps};
use crate::synth::ImageFrame;
use crate::tensor::{Bindings, Graph, Tensor, Var};
use crate::{Error, Result};

/// Stride of each pyramid level.
pub const STRIDES: [usize; LEVELS] = [1, 2, 4];

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let w = cfg.widths;
    let corr = cfg.corr_channels();
    let mut specs = Vec::new();
    let mut inp = 1;
    for (l, &c) in w.iter().enumerate() {
        specs.extend(ParamSpec::conv(&alloc::format!("backbone.g{}.c1", l + 1), c, inp, 3));
        specs.extend(ParamSpec::conv(&alloc::format!("backbone.g{}.c2", l + 1), c, c, 3));
        inp = c;
    }
    for l in (0..LEVELS).rev() {
        let from_above = if l + 1 < LEVELS { w[l + 1] } else { 0 };
        specs.extend(ParamSpec::conv(&alloc::format!("fuse.l{}", l + 1), w[l], w[l] + corr + from_above, 3));
        specs.extend(ParamSpec::conv(&alloc::format!("density.l{}", l + 1), 1, w[l], 3));
    }
    specs.extend(localization::param_specs(w));
    specs.extend(association::param_specs(w[0], cfg.association.hidden));
    specs
}

/// Network outputs for one frame of a pair.
#[derive(Debug, Clone, Copy)]
pub struct FrameOutputs {
    /// Density maps `[1, H/s, W/s]` per level.
    pub density: [Var; LEVELS],
    /// Localization maps; absent when the subnet is ablated.
    pub localization: Option<FusedMaps>,
    /// Fused stride-1 features `[C, H, W]`, input of the association subnet.
    pub fused: Var,
}

pub fn frame_tensor(frame: &ImageFrame) -> Result<Tensor> {
    Tensor::new(alloc::vec![1, frame.height, frame.width], frame.data.clone())
}

fn conv_relu(g: &mut Graph, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let k = b.get(&alloc::format!("{prefix}.k"))?;
    let bias = b.get(&alloc::format!("{prefix}.b"))?;
    let y = g.conv2d(x, k, bias, 1, 1)?;
    Ok(g.relu(y))
}

fn backbone(g: &mut Graph, b: &Bindings, x: Var) -> Result<[Var; LEVELS]> {
    let mut feats = Vec::with_capacity(LEVELS);
    let mut h = x;
    for l in 0..LEVELS {
        if l > 0 {
            h = g.maxpool2(h)?;
        }
        h = conv_relu(g, b, &alloc::format!("backbone.g{}.c1", l + 1), h)?;
        h = conv_relu(g, b, &alloc::format!("backbone.g{}.c2", l + 1), h)?;
        feats.push(h);
    }
    Ok([feats[0], feats[1], feats[2]])
}

/// Runs both frames through the shared-weight backbone, correlates the two
/// branches at every scale, fuses top-down and applies all heads. Each
/// frame's outputs use the correlation of that frame against the other.
pub fn forward(g: &mut Graph, b: &Bindings, cfg: &ModelConfig, pair: [&ImageFrame; 2]) -> Result<[FrameOutputs; 2]> {
    let (w, h) = (pair[0].width, pair[0].height);
    if pair[1].width != w || pair[1].height != h {
        return Err(Error::shape("forward", &[pair[0].height, w], &[pair[1].height, pair[1].width]));
    }
    if w % 4 != 0 || h % 4 != 0 || w == 0 || h == 0 {
        return Err(Error::invalid("forward", alloc::format!("frame {w}x{h} not divisible by 4")));
    }
    let mut feats = Vec::with_capacity(2);
    for frame in pair {
        let x = g.constant(frame_tensor(frame)?);
        feats.push(backbone(g, b, x)?);
    }
    let mut out = Vec::with_capacity(2);
    for t in 0..2 {
        let (own, other) = (feats[t], feats[1 - t]);
        let mut fused = [own[0]; LEVELS];
        let mut above: Option<Var> = None;
        for l in (0..LEVELS).rev() {
            let corr = g.correlate(own[l], other[l], cfg.max_disp)?;
            let mut parts = alloc::vec![own[l], corr];
            if let Some(a) = above {
                parts.push(g.upsample2_bilinear(a)?);
            }
            let cat = g.concat_channels(&parts)?;
            fused[l] = conv_relu(g, b, &alloc::format!("fuse.l{}", l + 1), cat)?;
            above = Some(fused[l]);
        }
        let mut density = [fused[0]; LEVELS];
        for l in 0..LEVELS {
            let k = b.get(&alloc::format!("density.l{}.k", l + 1))?;
            let bias = b.get(&alloc::format!("density.l{}.b", l + 1))?;
            let raw = g.conv2d(fused[l], k, bias, 1, 1)?;
            let scaled = g.mul_scalar(raw, 1.0 / cfg.density_scale);
            density[l] = g.relu(scaled);
        }
        let localization = if cfg.ablation.localization {
            Some(localization::attention_fuse(g, b, fused, cfg.attention)?)
        } else {
            None
        };
        out.push(FrameOutputs {
            density,
            localization,
            fused: fused[0],
        });
    }
    Ok([out[0], out[1]])
}
