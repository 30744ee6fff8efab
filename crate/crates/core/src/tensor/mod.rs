//! Dense `f64` tensors and a tape-based reverse-mode differentiation graph.
//!
//! A [`Graph`] owns every value produced while evaluating a model. Values are
//! addressed by [`Var`] handles, nodes are appended in evaluation order and
//! [`Graph::backward`] walks them in exact reverse. Shapes never broadcast:
//! every primitive checks that its operands agree and fails otherwise.

pub mod gradcheck;
pub mod kernels;

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};
use kernels::ConvGeom;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "Tensor::new",
                alloc::format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    Sum(Var),
    Concat { parts: Vec<Var>, sizes: Vec<usize> },
    ConcatCols { parts: Vec<Var>, widths: Vec<usize>, rows: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2 { x: Var, c: usize, h: usize, w: usize },
    Linear { x: Var, w: Var, b: Var, rows: usize, n: usize, m: usize },
    Correlate { f1: Var, f2: Var, c: usize, h: usize, w: usize, disp: usize },
    ScaleChannels { x: Var, gate: Var, plane: usize },
    ScaleSpatial { x: Var, gate: Var, plane: usize },
    GlobalAvgPool { x: Var, plane: usize },
    SelectMax { x: Var, argmax: Vec<usize> },
    ChannelMean { x: Var, c: usize },
    Gather { x: Var, idx: Vec<usize> },
    ScatterAdd { x: Var, idx: Vec<usize> },
    Reshape(Var),
    BceSum { p: Var, labels: Vec<f64>, eps: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recording of one evaluation. Single-threaded; build a fresh graph per
/// forward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if backward reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor; zeros when backward never reached the node.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.nodes[v.0].grad {
            Some(g) => Tensor {
                shape: value.shape.clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(value.shape()),
        }
    }

    // ---- primitives -------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), self.shape(b), stride, pad)?;
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(k).data(),
            self.value(b).data(),
            &geom,
        );
        let out = Tensor::new(vec![geom.k, geom.oh, geom.ow], data)?;
        Ok(self.push(out, &[x, k, b], Op::Conv2d { x, k, b, geom }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(0.0));
        self.push(out, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, kernels::sigmoid);
        self.push(out, &[x], Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.map(x, libm::fabs);
        self.push(out, &[x], Op::Abs(x))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.map(x, |v| v * s);
        self.push(out, &[x], Op::MulScalar(x, s))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::shape(op, &ta.shape, &tb.shape));
        }
        Ok(Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&p, &q)| f(p, q)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |p, q| p + q)?;
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |p, q| p - q)?;
        Ok(self.push(out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |p, q| p * q)?;
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, &[x], Op::Sum(x))
    }

    /// Sum of several same-shaped values.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts.split_first().ok_or(Error::Empty("add_all"))?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    /// Concatenate `[C_i, H, W]` maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_channels"))?;
        let lead = self.shape(first).to_vec();
        if lead.len() != 3 {
            return Err(Error::invalid("concat_channels", "inputs must be [C,H,W]"));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape.len() != 3 || t.shape[1..] != lead[1..] {
                return Err(Error::shape("concat_channels", &lead, &t.shape));
            }
            channels += t.shape[0];
            sizes.push(t.len());
            data.extend_from_slice(&t.data);
        }
        let out = Tensor::new(vec![channels, lead[1], lead[2]], data)?;
        Ok(self.push(
            out,
            parts,
            Op::Concat {
                parts: parts.to_vec(),
                sizes,
            },
        ))
    }

    /// Concatenate `[R, D_i]` matrices along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let lead = self.shape(first).to_vec();
        if lead.len() != 2 {
            return Err(Error::invalid("concat_cols", "inputs must be [R,D]"));
        }
        let rows = lead[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", &lead, s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * wd..(r + 1) * wd]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(
            out,
            parts,
            Op::ConcatCols {
                parts: parts.to_vec(),
                widths,
                rows,
            },
        ))
    }

    fn chw(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(Error::invalid(op, alloc::format!("expected [C,H,W], got {s:?}"))),
        }
    }

    /// 2x2 max pooling with stride 2; the gradient goes to the argmax only.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw("maxpool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "maxpool2",
                alloc::format!("spatial extents must be even, got {h}x{w}"),
            ));
        }
        let (data, argmax) = kernels::maxpool2_forward(self.value(x).data(), c, h, w);
        let out = Tensor::new(vec![c, h / 2, w / 2], data)?;
        Ok(self.push(out, &[x], Op::MaxPool2 { x, argmax }))
    }

    /// Bilinear 2x upsampling with half-pixel alignment and edge clamping.
    pub fn upsample2_bilinear(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw("upsample2_bilinear", x)?;
        if h == 0 || w == 0 {
            return Err(Error::Empty("upsample2_bilinear"));
        }
        let data = kernels::upsample2_forward(self.value(x).data(), c, h, w);
        let out = Tensor::new(vec![c, 2 * h, 2 * w], data)?;
        Ok(self.push(out, &[x], Op::Upsample2 { x, c, h, w }))
    }

    /// Affine map of a vector: `weights [m,n] * input [n] + bias [m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(Error::shape("dense", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("dense bias", ws, bs));
        }
        let (n, m) = (xs[0], ws[0]);
        let data = kernels::linear_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), 1, n, m);
        let out = Tensor::new(vec![m], data)?;
        Ok(self.push(out, &[x, w, b], Op::Linear { x, w, b, rows: 1, n, m }))
    }

    /// Row-wise affine map: `input [R,n]` times `weights [m,n]` transposed plus
    /// `bias [m]`, giving `[R,m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(Error::shape("linear", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("linear bias", ws, bs));
        }
        let (rows, n, m) = (xs[0], xs[1], ws[0]);
        let data = kernels::linear_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), rows, n, m);
        let out = Tensor::new(vec![rows, m], data)?;
        Ok(self.push(out, &[x, w, b], Op::Linear { x, w, b, rows, n, m }))
    }

    /// Correlation volume between two feature maps: channel
    /// `(dy+d)*(2d+1) + (dx+d)` holds `(1/C) sum_c f1(c,y,x) f2(c,y+dy,x+dx)`,
    /// zero where the displaced position leaves the map.
    pub fn correlate(&mut self, f1: Var, f2: Var, max_disp: usize) -> Result<Var> {
        if self.shape(f1) != self.shape(f2) {
            return Err(Error::shape("correlate", self.shape(f1), self.shape(f2)));
        }
        let (c, h, w) = self.chw("correlate", f1)?;
        if c == 0 {
            return Err(Error::Empty("correlate"));
        }
        let side = 2 * max_disp + 1;
        let data = kernels::correlate_forward(self.value(f1).data(), self.value(f2).data(), c, h, w, max_disp);
        let out = Tensor::new(vec![side * side, h, w], data)?;
        Ok(self.push(
            out,
            &[f1, f2],
            Op::Correlate {
                f1,
                f2,
                c,
                h,
                w,
                disp: max_disp,
            },
        ))
    }

    /// `x [C,H,W]` scaled per channel by `gate [C]`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (c, h, w) = self.chw("scale_channels", x)?;
        if self.shape(gate) != [c] {
            return Err(Error::shape("scale_channels", self.shape(x), self.shape(gate)));
        }
        let plane = h * w;
        let g = self.value(gate).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i / plane.max(1)])
            .collect();
        let out = Tensor::new(vec![c, h, w], data)?;
        Ok(self.push(out, &[x, gate], Op::ScaleChannels { x, gate, plane }))
    }

    /// `x [C,H,W]` scaled per pixel by `gate [1,H,W]`.
    pub fn scale_spatial(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (c, h, w) = self.chw("scale_spatial", x)?;
        if self.shape(gate) != [1, h, w] {
            return Err(Error::shape("scale_spatial", self.shape(x), self.shape(gate)));
        }
        let plane = h * w;
        let g = self.value(gate).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % plane])
            .collect();
        let out = Tensor::new(vec![c, h, w], data)?;
        Ok(self.push(out, &[x, gate], Op::ScaleSpatial { x, gate, plane }))
    }

    /// Spatial mean per channel: `[C,H,W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw("global_avg_pool", x)?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::Empty("global_avg_pool"));
        }
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(vec![c], data)?;
        Ok(self.push(out, &[x], Op::GlobalAvgPool { x, plane }))
    }

    /// Spatial max per channel: `[C,H,W] -> [C]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw("global_max_pool", x)?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::Empty("global_max_pool"));
        }
        let t = self.value(x).data();
        let argmax: Vec<usize> = (0..c)
            .map(|ch| argmax_of((0..plane).map(|i| ch * plane + i), t))
            .collect();
        let data = argmax.iter().map(|&i| t[i]).collect();
        let out = Tensor::new(vec![c], data)?;
        Ok(self.push(out, &[x], Op::SelectMax { x, argmax }))
    }

    /// Mean over channels: `[C,H,W] -> [1,H,W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw("channel_mean", x)?;
        if c == 0 {
            return Err(Error::Empty("channel_mean"));
        }
        let plane = h * w;
        let t = self.value(x).data();
        let data = (0..plane)
            .map(|i| (0..c).map(|ch| t[ch * plane + i]).sum::<f64>() / c as f64)
            .collect();
        let out = Tensor::new(vec![1, h, w], data)?;
        Ok(self.push(out, &[x], Op::ChannelMean { x, c }))
    }

    /// Max over channels: `[C,H,W] -> [1,H,W]`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw("channel_max", x)?;
        if c == 0 {
            return Err(Error::Empty("channel_max"));
        }
        let plane = h * w;
        let t = self.value(x).data();
        let argmax: Vec<usize> = (0..plane)
            .map(|i| argmax_of((0..c).map(|ch| ch * plane + i), t))
            .collect();
        let data = argmax.iter().map(|&i| t[i]).collect();
        let out = Tensor::new(vec![1, h, w], data)?;
        Ok(self.push(out, &[x], Op::SelectMax { x, argmax }))
    }

    /// Flat gather: `out[i] = x[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::shape("gather", &[idx.len()], shape));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.len()) {
            return Err(Error::invalid("gather", alloc::format!("index {bad} out of range {}", t.len())));
        }
        let data = idx.iter().map(|&i| t.data[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, &[x], Op::Gather { x, idx }))
    }

    /// Rows `rows` of a matrix `[R,D]`, giving `[rows.len(), D]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, d) = match *self.shape(x) {
            [r, d] => (r, d),
            ref s => return Err(Error::invalid("gather_rows", alloc::format!("expected [R,D], got {s:?}"))),
        };
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::invalid("gather_rows", alloc::format!("row {bad} out of range {r}")));
        }
        let idx = rows.iter().flat_map(|&i| (0..d).map(move |j| i * d + j)).collect();
        self.gather(x, idx, &[rows.len(), d])
    }

    /// Columns `start..start+width` of a matrix `[R,D]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, d) = match *self.shape(x) {
            [r, d] => (r, d),
            ref s => return Err(Error::invalid("slice_cols", alloc::format!("expected [R,D], got {s:?}"))),
        };
        if start + width > d {
            return Err(Error::invalid("slice_cols", alloc::format!("{start}+{width} exceeds {d} columns")));
        }
        let idx = (0..r).flat_map(|i| (start..start + width).map(move |j| i * d + j)).collect();
        self.gather(x, idx, &[r, width])
    }

    /// Feature vectors of a `[C,H,W]` map at pixel positions `(row, col)`,
    /// giving `[N, C]`.
    pub fn sample_pixels(&mut self, x: Var, pixels: &[(usize, usize)]) -> Result<Var> {
        let (c, h, w) = self.chw("sample_pixels", x)?;
        if let Some(&(py, px)) = pixels.iter().find(|&&(py, px)| py >= h || px >= w) {
            return Err(Error::invalid("sample_pixels", alloc::format!("pixel ({py},{px}) outside {h}x{w}")));
        }
        let idx = pixels
            .iter()
            .flat_map(|&(py, px)| (0..c).map(move |ch| ch * h * w + py * w + px))
            .collect();
        self.gather(x, idx, &[pixels.len(), c])
    }

    /// Flat scatter-add: `out[idx[i]] += x[i]` into a zero tensor of `shape`.
    pub fn scatter_add(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if idx.len() != t.len() {
            return Err(Error::shape("scatter_add", &[idx.len()], t.shape()));
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        for (&i, &v) in idx.iter().zip(&t.data) {
            if i >= n {
                return Err(Error::invalid("scatter_add", alloc::format!("index {i} out of range {n}")));
            }
            data[i] += v;
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, &[x], Op::ScatterAdd { x, idx }))
    }

    /// Sum rows of `[R,D]` into `n` groups: row `r` goes to group `groups[r]`.
    pub fn segment_sum(&mut self, x: Var, groups: &[usize], n: usize) -> Result<Var> {
        let (r, d) = match *self.shape(x) {
            [r, d] => (r, d),
            ref s => return Err(Error::invalid("segment_sum", alloc::format!("expected [R,D], got {s:?}"))),
        };
        if groups.len() != r {
            return Err(Error::shape("segment_sum", &[groups.len()], &[r, d]));
        }
        let idx = groups.iter().flat_map(|&gi| (0..d).map(move |j| gi * d + j)).collect();
        self.scatter_add(x, idx, &[n, d])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, &[x], Op::Reshape(x)))
    }

    /// Summed binary log loss of probabilities `p` against 0/1 `labels`, with
    /// `p` clamped to `[eps, 1-eps]`.
    pub fn bce_sum(&mut self, p: Var, labels: &[f64], eps: f64) -> Result<Var> {
        let t = self.value(p);
        if t.len() != labels.len() {
            return Err(Error::shape("bce_sum", t.shape(), &[labels.len()]));
        }
        let total = t
            .data
            .iter()
            .zip(labels)
            .map(|(&q, &c)| {
                let q = q.clamp(eps, 1.0 - eps);
                -(c * libm::log(q) + (1.0 - c) * libm::log(1.0 - q))
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            &[p],
            Op::BceSum {
                p,
                labels: labels.to_vec(),
                eps,
            },
        ))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Accumulates d`loss`/d`v` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                let contributions = self.local_grads(i, &grad);
                for (v, g) in contributions {
                    self.accumulate(v, g);
                }
            }
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, k, b, geom } => {
                let (gx, gk, gb) = kernels::conv2d_backward(val(*x), val(*k), g, geom);
                vec![(*x, gx), (*k, gk), (*b, gb)]
            }
            Op::Relu(x) => {
                let d = val(*x).iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                vec![(*x, d)]
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                vec![(*x, y.iter().zip(g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect())]
            }
            Op::Abs(x) => {
                let d = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else if v < 0.0 { -gv } else { 0.0 })
                    .collect();
                vec![(*x, d)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if needs(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(p, q)| p * q).collect()));
                }
                if needs(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(p, q)| p * q).collect()));
                }
                out
            }
            Op::MulScalar(x, s) => vec![(*x, g.iter().map(|v| v * s).collect())],
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Concat { parts, sizes } => {
                let mut off = 0;
                parts
                    .iter()
                    .zip(sizes)
                    .map(|(&p, &n)| {
                        let piece = g[off..off + n].to_vec();
                        off += n;
                        (p, piece)
                    })
                    .collect()
            }
            Op::ConcatCols { parts, widths, rows } => {
                let total: usize = widths.iter().sum();
                let mut col = 0;
                parts
                    .iter()
                    .zip(widths)
                    .map(|(&p, &wd)| {
                        let mut piece = Vec::with_capacity(rows * wd);
                        for r in 0..*rows {
                            piece.extend_from_slice(&g[r * total + col..r * total + col + wd]);
                        }
                        col += wd;
                        (p, piece)
                    })
                    .collect()
            }
            Op::MaxPool2 { x, argmax } | Op::SelectMax { x, argmax } => {
                let mut d = vec![0.0; val(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
                vec![(*x, d)]
            }
            Op::Upsample2 { x, c, h, w } => vec![(*x, kernels::upsample2_backward(g, *c, *h, *w))],
            Op::Linear { x, w, b, rows, n, m } => {
                let (gx, gw, gb) = kernels::linear_backward(val(*x), val(*w), g, *rows, *n, *m);
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Correlate { f1, f2, c, h, w, disp } => {
                let (g1, g2) = kernels::correlate_backward(val(*f1), val(*f2), g, *c, *h, *w, *disp);
                vec![(*f1, g1), (*f2, g2)]
            }
            Op::ScaleChannels { x, gate, plane } => {
                let xv = val(*x);
                let gv = val(*gate);
                let plane = (*plane).max(1);
                let dx = g.iter().enumerate().map(|(i, &d)| d * gv[i / plane]).collect();
                let mut dg = vec![0.0; gv.len()];
                for (i, (&d, &v)) in g.iter().zip(xv).enumerate() {
                    dg[i / plane] += d * v;
                }
                vec![(*x, dx), (*gate, dg)]
            }
            Op::ScaleSpatial { x, gate, plane } => {
                let xv = val(*x);
                let gv = val(*gate);
                let dx = g.iter().enumerate().map(|(i, &d)| d * gv[i % plane]).collect();
                let mut dg = vec![0.0; gv.len()];
                for (i, (&d, &v)) in g.iter().zip(xv).enumerate() {
                    dg[i % plane] += d * v;
                }
                vec![(*x, dx), (*gate, dg)]
            }
            Op::GlobalAvgPool { x, plane } => {
                let n = val(*x).len();
                let inv = 1.0 / *plane as f64;
                vec![(*x, (0..n).map(|i| g[i / plane] * inv).collect())]
            }
            Op::ChannelMean { x, c } => {
                let plane = g.len();
                let inv = 1.0 / *c as f64;
                vec![(*x, (0..c * plane).map(|i| g[i % plane] * inv).collect())]
            }
            Op::Gather { x, idx } => {
                let mut d = vec![0.0; val(*x).len()];
                for (&src, &gv) in idx.iter().zip(g) {
                    d[src] += gv;
                }
                vec![(*x, d)]
            }
            Op::ScatterAdd { x, idx } => vec![(*x, idx.iter().map(|&i| g[i]).collect())],
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::BceSum { p, labels, eps } => {
                let d = val(*p)
                    .iter()
                    .zip(labels)
                    .map(|(&q, &c)| {
                        if q < *eps || q > 1.0 - *eps {
                            0.0
                        } else {
                            g[0] * (-c / q + (1.0 - c) / (1.0 - q))
                        }
                    })
                    .collect();
                vec![(*p, d)]
            }
        }
    }
}

fn argmax_of(indices: impl Iterator<Item = usize>, data: &[f64]) -> usize {
    let mut best: Option<usize> = None;
    for i in indices {
        match best {
            Some(b) if data[i] <= data[b] => {}
            _ => best = Some(i),
        }
    }
    best.unwrap_or(0)
}

/// Named learnable tensors bound into one graph.
#[derive(Debug, Default, Clone)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Binds every tensor in `params`; names in `frozen` become constants.
    pub fn bind<'a>(
        graph: &mut Graph,
        params: impl IntoIterator<Item = (&'a String, &'a Tensor)>,
        frozen: &dyn Fn(&str) -> bool,
    ) -> Self {
        let vars = params
            .into_iter()
            .map(|(name, t)| {
                let v = if frozen(name) {
                    graph.constant(t.clone())
                } else {
                    graph.param(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
