//! Ground-truth density maps and the multi-scale density loss.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::Point2;
use crate::synth::{in_bounds, FrameAnnotations};
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Number of pyramid levels; level `l` (0-based here) has stride `2^l`.
pub const LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights(pub [f64; LEVELS]);

impl Default for LossWeights {
    fn default() -> Self {
        Self([2.0, 0.5, 0.05])
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|&w| w > 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("LossWeights", alloc::format!("weights must be positive, got {:?}", self.0)))
        }
    }
}

/// Geometry-adaptive kernel width parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaParams {
    pub beta: f64,
    pub neighbors: usize,
    /// Used when a point has no neighbor at all.
    pub fallback: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for SigmaParams {
    fn default() -> Self {
        Self {
            beta: 0.3,
            neighbors: 3,
            fallback: 15.0,
            min: 1.0,
            max: 25.0,
        }
    }
}

/// Per-point kernel width: `beta` times the mean distance to the
/// `min(k, n-1)` nearest other points, clamped to `[min, max]`.
pub fn adaptive_sigma(points: &[Point2]) -> Result<Vec<f64>> {
    adaptive_sigma_with(points, &SigmaParams::default())
}

pub fn adaptive_sigma_with(points: &[Point2], p: &SigmaParams) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::Empty("adaptive_sigma"));
    }
    let k = p.neighbors.min(points.len() - 1);
    if k == 0 {
        return Ok(vec![p.fallback.clamp(p.min, p.max); points.len()]);
    }
    let mut dists = Vec::with_capacity(points.len());
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            dists.clear();
            dists.extend(points.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &b)| a.dist(b)));
            dists.sort_by(f64::total_cmp);
            let mean = dists[..k].iter().sum::<f64>() / k as f64;
            (p.beta * mean).clamp(p.min, p.max)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityPyramid {
    /// Level `l` has shape `[1, H/2^l, W/2^l]`.
    pub levels: Vec<Tensor>,
}

impl DensityPyramid {
    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l]
    }

    pub fn masses(&self) -> Vec<f64> {
        self.levels.iter().map(Tensor::sum).collect()
    }
}

/// Unit-mass Gaussian splat of each point with its own sigma, truncated at
/// `4 sigma` and at the frame border and renormalized.
pub fn splat(points: &[Point2], sigmas: &[f64], width: usize, height: usize) -> Result<Tensor> {
    if points.len() != sigmas.len() {
        return Err(Error::shape("splat", &[points.len()], &[sigmas.len()]));
    }
    let mut map = vec![0.0; width * height];
    let mut weights = Vec::new();
    for (&p, &sigma) in points.iter().zip(sigmas) {
        if !in_bounds(p, width, height) {
            return Err(Error::invalid(
                "build_density_pyramid",
                alloc::format!("point ({}, {}) outside {width}x{height}", p.x, p.y),
            ));
        }
        let reach = 4.0 * sigma;
        let inv = 1.0 / (2.0 * sigma * sigma);
        let x0 = libm::ceil(p.x - reach).max(0.0) as usize;
        let x1 = (libm::floor(p.x + reach) as usize).min(width - 1);
        let y0 = libm::ceil(p.y - reach).max(0.0) as usize;
        let y1 = (libm::floor(p.y + reach) as usize).min(height - 1);
        weights.clear();
        let mut total = 0.0;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = Point2::new(x as f64, y as f64).dist_sq(p);
                if d2 <= reach * reach {
                    let v = libm::exp(-d2 * inv);
                    total += v;
                    weights.push((y * width + x, v));
                }
            }
        }
        for &(i, v) in &weights {
            map[i] += v / total;
        }
    }
    Tensor::new(vec![1, height, width], map)
}

/// 2x2 sum pooling of a `[1, H, W]` map.
pub fn sum_pool2(map: &Tensor) -> Result<Tensor> {
    let (h, w) = match *map.shape() {
        [1, h, w] if h % 2 == 0 && w % 2 == 0 => (h, w),
        ref s => return Err(Error::invalid("sum_pool2", alloc::format!("need [1, even, even], got {s:?}"))),
    };
    let d = map.data();
    let mut out = Vec::with_capacity(h * w / 4);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            let i = 2 * y * w + 2 * x;
            out.push(d[i] + d[i + 1] + d[i + w] + d[i + w + 1]);
        }
    }
    Tensor::new(vec![1, h / 2, w / 2], out)
}

pub fn pyramid_from_level1(level1: Tensor) -> Result<DensityPyramid> {
    let mut levels = vec![level1];
    for _ in 1..LEVELS {
        let next = sum_pool2(levels.last().unwrap())?;
        levels.push(next);
    }
    Ok(DensityPyramid { levels })
}

/// Ground-truth pyramid for one frame: adaptive-sigma splats at stride 1 and
/// sum-pooled coarser levels. Width and height must be divisible by 4.
pub fn build_density_pyramid(ann: &FrameAnnotations, width: usize, height: usize) -> Result<DensityPyramid> {
    let div = 1 << (LEVELS - 1);
    if width == 0 || height == 0 || width % div != 0 || height % div != 0 {
        return Err(Error::invalid(
            "build_density_pyramid",
            alloc::format!("{width}x{height} not divisible by {div}"),
        ));
    }
    let points = ann.positions();
    let sigmas = if points.is_empty() {
        Vec::new()
    } else {
        adaptive_sigma(&points)?
    };
    pyramid_from_level1(splat(&points, &sigmas, width, height)?)
}

/// Estimated count: total mass of a level-1 map.
pub fn count_from_map(level1: &Tensor) -> f64 {
    level1.sum()
}

/// `1/(2L) * sum_t sum_l w_l * sum_ij (pred - gt)^2` over a frame pair.
pub fn density_loss(
    g: &mut Graph,
    pred: &[[Var; LEVELS]; 2],
    gt: &[&DensityPyramid; 2],
    weights: &LossWeights,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(2 * LEVELS);
    for t in 0..2 {
        if gt[t].levels.len() != LEVELS {
            return Err(Error::shape("density_loss", &[LEVELS], &[gt[t].levels.len()]));
        }
        for l in 0..LEVELS {
            let target = &gt[t].levels[l];
            if g.shape(pred[t][l]) != target.shape() {
                return Err(Error::shape("density_loss", g.shape(pred[t][l]), target.shape()));
            }
            let c = g.constant(target.clone());
            let diff = g.sub(pred[t][l], c)?;
            let sq = g.mul(diff, diff)?;
            let s = g.sum(sq);
            terms.push(g.mul_scalar(s, weights.0[l]));
        }
    }
    let total = g.add_all(&terms)?;
    Ok(g.mul_scalar(total, 1.0 / (2.0 * LEVELS as f64)))
}
