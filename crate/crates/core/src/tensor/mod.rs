//! Dense tensors on a reverse-mode gradient tape.
//!
//! The tape owns every tensor created during a forward pass (an arena indexed
//! by [`TensorId`]) and records one node per operation. `backward` replays the
//! nodes in reverse insertion order, which is a reverse topological order
//! because operands always precede their consumers. Gradients accumulate
//! additively across uses.
//!
//! The pipeline runs in 32-bit floats ([`Tensor`] and [`Tape`] alias the f32
//! instantiation). The same generic kernels instantiated at f64 back the
//! finite-difference oracle in [`gradcheck`]. Kernels are single-threaded and
//! deterministic: identical inputs produce bit-identical outputs.

mod conv;
pub mod gradcheck;
mod kernels;
pub mod scalar;

use crate::error::{Error, Result};
pub use scalar::Real;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Dense N-dimensional array participating in a gradient tape.
#[derive(Debug, Clone, Default)]
pub struct TensorOf<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

/// The pipeline's tensor type: 32-bit float semantics.
pub type Tensor = TensorOf<f32>;

impl<S: Real> TensorOf<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(TensorOf { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        TensorOf { shape, data: vec![S::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn filled(shape: Vec<usize>, value: S) -> Self {
        let numel: usize = shape.iter().product();
        TensorOf { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        TensorOf::new(shape, data.iter().map(|&v| S::of(v)).collect())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Resampling modes of [`Tape::resample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    /// Bilinear x2 upscale of the two trailing dims (align-corners false).
    BilinearUp2,
    /// Bilinear x4 upscale of the two trailing dims (align-corners false).
    BilinearUp4,
    /// 2x2 mean pooling of the two trailing dims.
    AvgPoolDown2,
}

#[derive(Debug, Clone)]
enum Op {
    Conv2d { stride: usize, padding: usize },
    Conv3d { padding: usize },
    Add,
    Sub,
    Mul,
    Div,
    Scale(f32),
    Offset(#[allow(dead_code)] f32),
    Sigmoid,
    Relu,
    Abs,
    /// Smooth-L1 kernel with transition point 1.
    Huber,
    ClampMin(f32),
    Sum,
    MeanAxis0,
    Median,
    /// Softmax-weighted index expectation along axis 0.
    SoftArgmax,
    Resample(ResampleMode),
    /// Stride-2 mean pooling of axis 0 only.
    PoolAxis0,
    GatherH,
    /// Linear sampling along axis 0 at per-pixel coords plus -r..=r offsets.
    SampleOffsets { radius: usize },
    /// Group-wise left/right feature correlation over candidate disparities.
    GroupCorr { groups: usize, max_disp_q: usize },
    /// Row-wise correlation of every left column against every right column.
    AllPairCorr,
    Concat { axis: usize },
    Reshape,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<TensorId>,
    out: TensorId,
}

/// Gradient tape: tensor arena plus the recorded operation list.
pub struct TapeOf<S> {
    tensors: Vec<TensorOf<S>>,
    nodes: Vec<Node>,
}

/// The pipeline's tape type (f32).
pub type Tape = TapeOf<f32>;

impl<S> Default for TapeOf<S> {
    fn default() -> Self {
        TapeOf { tensors: Vec::new(), nodes: Vec::new() }
    }
}

impl<S: Real> TapeOf<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded operations.
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Register a tensor that does not receive gradients.
    pub fn constant(&mut self, t: TensorOf<S>) -> TensorId {
        self.push(TensorOf { requires_grad: false, grad: None, ..t })
    }

    /// Register a gradient-tracked leaf (parameter or checked input).
    pub fn leaf(&mut self, t: TensorOf<S>) -> TensorId {
        self.push(TensorOf { requires_grad: true, grad: None, ..t })
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<TensorId> {
        Ok(self.constant(TensorOf::new(shape, data)?))
    }

    pub fn constant_f32(&mut self, shape: Vec<usize>, data: &[f32]) -> Result<TensorId> {
        Ok(self.constant(TensorOf::from_f32(shape, data)?))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorId {
        self.constant(TensorOf::zeros(shape))
    }

    /// Copy the value of `id` into a fresh constant leaf, cutting gradient flow.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let t = &self.tensors[id.0];
        let copy = TensorOf {
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad: false,
            grad: None,
        };
        self.push(copy)
    }

    pub fn tensor(&self, id: TensorId) -> &TensorOf<S> {
        &self.tensors[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.tensors[id.0].data
    }

    pub fn data_f32(&self, id: TensorId) -> Vec<f32> {
        self.tensors[id.0].data.iter().map(|v| v.as_f32()).collect()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.tensors[id.0].data.len()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.tensors[id.0].grad.as_deref()
    }

    fn push(&mut self, t: TensorOf<S>) -> TensorId {
        let id = TensorId(self.tensors.len());
        self.tensors.push(t);
        id
    }

    fn record(&mut self, op: Op, inputs: Vec<TensorId>, shape: Vec<usize>, data: Vec<S>) -> TensorId {
        let requires_grad = inputs.iter().any(|i| self.tensors[i.0].requires_grad);
        let out = self.push(TensorOf { shape, data, requires_grad, grad: None });
        self.nodes.push(Node { op, inputs, out });
        out
    }

    fn expect_ndim(&self, id: TensorId, ndim: usize, what: &str) -> Result<()> {
        let got = self.tensors[id.0].shape.len();
        if got != ndim {
            return Err(Error::contract(format!("{what}: expected {ndim}-d tensor, got {got}-d")));
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------

    fn binary_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.tensors[a.0].shape, &self.tensors[b.0].shape);
        let (na, nb) = (self.tensors[a.0].data.len(), self.tensors[b.0].data.len());
        if sa == sb {
            Ok(sa.clone())
        } else if nb == 1 {
            Ok(sa.clone())
        } else if na == 1 {
            Ok(sb.clone())
        } else {
            Err(Error::contract(format!(
                "{what}: shapes {sa:?} and {sb:?} are neither equal nor scalar-broadcastable"
            )))
        }
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shape(a, b, "add")?;
        let data = kernels::binary(&self.tensors[a.0].data, &self.tensors[b.0].data, |x, y| x + y);
        Ok(self.record(Op::Add, vec![a, b], shape, data))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shape(a, b, "sub")?;
        let data = kernels::binary(&self.tensors[a.0].data, &self.tensors[b.0].data, |x, y| x - y);
        Ok(self.record(Op::Sub, vec![a, b], shape, data))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shape(a, b, "mul")?;
        let data = kernels::binary(&self.tensors[a.0].data, &self.tensors[b.0].data, |x, y| x * y);
        Ok(self.record(Op::Mul, vec![a, b], shape, data))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shape(a, b, "div")?;
        let data = kernels::binary(&self.tensors[a.0].data, &self.tensors[b.0].data, |x, y| x / y);
        Ok(self.record(Op::Div, vec![a, b], shape, data))
    }

    /// Multiply by a compile-time-known scalar.
    pub fn scale(&mut self, a: TensorId, c: f32) -> TensorId {
        let shape = self.tensors[a.0].shape.clone();
        let cs = S::of(c);
        let data = self.tensors[a.0].data.iter().map(|&x| x * cs).collect();
        self.record(Op::Scale(c), vec![a], shape, data)
    }

    /// Add a compile-time-known scalar.
    pub fn offset(&mut self, a: TensorId, c: f32) -> TensorId {
        let shape = self.tensors[a.0].shape.clone();
        let cs = S::of(c);
        let data = self.tensors[a.0].data.iter().map(|&x| x + cs).collect();
        self.record(Op::Offset(c), vec![a], shape, data)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let shape = self.tensors[a.0].shape.clone();
        let data = self.tensors[a.0].data.iter().map(|&x| kernels::sigmoid(x)).collect();
        self.record(Op::Sigmoid, vec![a], shape, data)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let shape = self.tensors[a.0].shape.clone();
        let data = self.tensors[a.0].data.iter().map(|&x| x.max(S::zero())).collect();
        self.record(Op::Relu, vec![a], shape, data)
    }

    /// Absolute value; subgradient 0 at 0.
    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let shape = self.tensors[a.0].shape.clone();
        let data = self.tensors[a.0].data.iter().map(|x| x.abs()).collect();
        self.record(Op::Abs, vec![a], shape, data)
    }

    /// Smooth-L1 with transition point 1: 0.5*x^2 for |x| < 1, |x| - 0.5 beyond.
    pub fn huber(&mut self, a: TensorId) -> TensorId {
        let shape = self.tensors[a.0].shape.clone();
        let half = S::of(0.5);
        let data = self.tensors[a.0]
            .data
            .iter()
            .map(|&x| if x.abs() < S::one() { half * x * x } else { x.abs() - half })
            .collect();
        self.record(Op::Huber, vec![a], shape, data)
    }

    pub fn clamp_min(&mut self, a: TensorId, min: f32) -> TensorId {
        let shape = self.tensors[a.0].shape.clone();
        let m = S::of(min);
        let data = self.tensors[a.0].data.iter().map(|&x| x.max(m)).collect();
        self.record(Op::ClampMin(min), vec![a], shape, data)
    }

    // ---- reductions --------------------------------------------------

    /// Sum of all elements; output shape [1].
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut s = S::zero();
        for v in &self.tensors[a.0].data {
            s += *v;
        }
        self.record(Op::Sum, vec![a], vec![1], vec![s])
    }

    /// Mean over axis 0: [A, rest..] -> [rest..].
    pub fn mean_axis0(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = &self.tensors[a.0].shape;
        if shape.is_empty() || shape[0] == 0 {
            return Err(Error::contract("mean_axis0: axis 0 must be non-empty"));
        }
        let out_shape = shape[1..].to_vec();
        let data = kernels::mean_axis0(&self.tensors[a.0].data, shape[0]);
        Ok(self.record(Op::MeanAxis0, vec![a], out_shape, data))
    }

    /// Median of all elements (average of the two middle values for even
    /// counts); output shape [1].
    pub fn median(&mut self, a: TensorId) -> Result<TensorId> {
        if self.tensors[a.0].data.is_empty() {
            return Err(Error::contract("median: empty tensor"));
        }
        let m = kernels::median_value(&self.tensors[a.0].data);
        Ok(self.record(Op::Median, vec![a], vec![1], vec![m]))
    }

    /// Softmax-expectation of the index along axis 0: [A, rest..] -> [rest..].
    pub fn soft_argmax(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = &self.tensors[a.0].shape;
        if shape.is_empty() || shape[0] < 2 {
            return Err(Error::contract("soft_argmax: axis 0 must have length >= 2"));
        }
        let out_shape = shape[1..].to_vec();
        let data = kernels::soft_argmax(&self.tensors[a.0].data, shape[0]);
        Ok(self.record(Op::SoftArgmax, vec![a], out_shape, data))
    }

    // ---- structure ---------------------------------------------------

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.tensors[a.0].data.len() {
            return Err(Error::contract(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.tensors[a.0].shape, shape
            )));
        }
        let data = self.tensors[a.0].data.clone();
        Ok(self.record(Op::Reshape, vec![a], shape, data))
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::contract("concat: no inputs"));
        }
        let base = self.tensors[inputs[0].0].shape.clone();
        if axis >= base.len() {
            return Err(Error::contract(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = &self.tensors[id.0].shape;
            if s.len() != base.len() {
                return Err(Error::contract("concat: rank mismatch"));
            }
            for (d, (&a, &b)) in s.iter().zip(base.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::contract(format!("concat: dim {d} mismatch ({a} vs {b})")));
                }
            }
            axis_total += s[axis];
        }
        let mut shape = base;
        shape[axis] = axis_total;
        let parts: Vec<(&[S], usize)> = inputs
            .iter()
            .map(|&id| (self.tensors[id.0].data.as_slice(), self.tensors[id.0].shape[axis]))
            .collect();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let data = kernels::concat(&parts, outer, inner);
        Ok(self.record(Op::Concat { axis }, inputs.to_vec(), shape, data))
    }

    // ---- convolution -------------------------------------------------

    /// 2-d cross-correlation convolution over [N,C,H,W] with [O,C,kh,kw]
    /// weights, an [O] bias, zero padding and a common stride.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        self.expect_ndim(input, 4, "conv2d input")?;
        self.expect_ndim(weight, 4, "conv2d weight")?;
        self.expect_ndim(bias, 1, "conv2d bias")?;
        let xs = self.tensors[input.0].shape.clone();
        let ws = self.tensors[weight.0].shape.clone();
        if xs[1] != ws[1] {
            return Err(Error::contract(format!(
                "conv2d: input channel axis ({}) != weight channel axis ({})",
                xs[1], ws[1]
            )));
        }
        if self.tensors[bias.0].shape[0] != ws[0] {
            return Err(Error::contract(format!(
                "conv2d: bias axis ({}) != output channel axis ({})",
                self.tensors[bias.0].shape[0], ws[0]
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d: stride must be >= 1"));
        }
        let (h, w) = (xs[2], xs[3]);
        let (kh, kw) = (ws[2], ws[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::contract(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let data = conv::conv2d_fwd(
            &self.tensors[input.0].data,
            &xs,
            &self.tensors[weight.0].data,
            &ws,
            &self.tensors[bias.0].data,
            stride,
            padding,
            oh,
            ow,
        );
        let shape = vec![xs[0], ws[0], oh, ow];
        Ok(self.record(Op::Conv2d { stride, padding }, vec![input, weight, bias], shape, data))
    }

    /// conv2d on a batchless [C,H,W] tensor; returns [O,H',W'].
    pub fn conv2d_chw(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        self.expect_ndim(input, 3, "conv2d_chw input")?;
        let s = self.tensors[input.0].shape.clone();
        let x4 = self.reshape(input, vec![1, s[0], s[1], s[2]])?;
        let y = self.conv2d(x4, weight, bias, stride, padding)?;
        let ys = self.tensors[y.0].shape.clone();
        self.reshape(y, ys[1..].to_vec())
    }

    /// 3-d convolution over [C,D,H,W] with [O,C,kd,kh,kw] weights, stride 1.
    pub fn conv3d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        padding: usize,
    ) -> Result<TensorId> {
        self.expect_ndim(input, 4, "conv3d input")?;
        self.expect_ndim(weight, 5, "conv3d weight")?;
        self.expect_ndim(bias, 1, "conv3d bias")?;
        let xs = self.tensors[input.0].shape.clone();
        let ws = self.tensors[weight.0].shape.clone();
        if xs[0] != ws[1] {
            return Err(Error::contract(format!(
                "conv3d: input channel axis ({}) != weight channel axis ({})",
                xs[0], ws[1]
            )));
        }
        if self.tensors[bias.0].shape[0] != ws[0] {
            return Err(Error::contract("conv3d: bias length != output channels"));
        }
        let (d, h, w) = (xs[1], xs[2], xs[3]);
        let (kd, kh, kw) = (ws[2], ws[3], ws[4]);
        if d + 2 * padding < kd || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::contract("conv3d: kernel larger than padded input"));
        }
        let data = conv::conv3d_fwd(
            &self.tensors[input.0].data,
            &xs,
            &self.tensors[weight.0].data,
            &ws,
            &self.tensors[bias.0].data,
            padding,
        );
        let shape = vec![
            ws[0],
            d + 2 * padding + 1 - kd,
            h + 2 * padding + 1 - kh,
            w + 2 * padding + 1 - kw,
        ];
        Ok(self.record(Op::Conv3d { padding }, vec![input, weight, bias], shape, data))
    }

    // ---- resampling ----------------------------------------------------

    /// Rescale the two trailing spatial dims; leading dims are flattened.
    pub fn resample(&mut self, input: TensorId, mode: ResampleMode) -> Result<TensorId> {
        let s = self.tensors[input.0].shape.clone();
        if s.len() < 2 {
            return Err(Error::contract("resample: need at least 2 dims"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let outer: usize = s[..s.len() - 2].iter().product();
        let (oh, ow) = match mode {
            ResampleMode::BilinearUp2 => (h * 2, w * 2),
            ResampleMode::BilinearUp4 => (h * 4, w * 4),
            ResampleMode::AvgPoolDown2 => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::contract(format!(
                        "resample down2: spatial dims {h}x{w} must be even"
                    )));
                }
                (h / 2, w / 2)
            }
        };
        let data = match mode {
            ResampleMode::BilinearUp2 => kernels::bilinear_up(&self.tensors[input.0].data, outer, h, w, 2),
            ResampleMode::BilinearUp4 => kernels::bilinear_up(&self.tensors[input.0].data, outer, h, w, 4),
            ResampleMode::AvgPoolDown2 => kernels::avgpool2(&self.tensors[input.0].data, outer, h, w),
        };
        let mut shape = s;
        let n = shape.len();
        shape[n - 2] = oh;
        shape[n - 1] = ow;
        Ok(self.record(Op::Resample(mode), vec![input], shape, data))
    }

    /// Stride-2 mean pooling along axis 0: [A, rest..] -> [A/2, rest..].
    pub fn pool_axis0(&mut self, input: TensorId) -> Result<TensorId> {
        let s = self.tensors[input.0].shape.clone();
        if s.is_empty() || s[0] % 2 != 0 {
            return Err(Error::contract(format!(
                "pool_axis0: axis 0 ({:?}) must be even",
                s.first()
            )));
        }
        let inner: usize = s[1..].iter().product();
        let data = kernels::pool_axis0(&self.tensors[input.0].data, s[0], inner);
        let mut shape = s;
        shape[0] /= 2;
        Ok(self.record(Op::PoolAxis0, vec![input], shape, data))
    }

    // ---- sampling ------------------------------------------------------

    /// Per-pixel linear interpolation along the width axis at fractional
    /// column positions. Out-of-range positions read zero. Input is
    /// [N,C,H,W], coords [N,H,W]; differentiable in both.
    pub fn gather_horizontal(&mut self, input: TensorId, coords: TensorId) -> Result<TensorId> {
        self.expect_ndim(input, 4, "gather_horizontal input")?;
        self.expect_ndim(coords, 3, "gather_horizontal coords")?;
        let xs = self.tensors[input.0].shape.clone();
        let cs = self.tensors[coords.0].shape.clone();
        if cs != [xs[0], xs[2], xs[3]] {
            return Err(Error::contract(format!(
                "gather_horizontal: coords shape {:?} must be [N,H,W] = [{},{},{}]",
                cs, xs[0], xs[2], xs[3]
            )));
        }
        let data = kernels::gather_h(&self.tensors[input.0].data, &xs, &self.tensors[coords.0].data);
        Ok(self.record(Op::GatherH, vec![input, coords], xs, data))
    }

    /// gather_horizontal on a batchless [C,H,W] tensor with [H,W] coords.
    pub fn gather_horizontal_chw(&mut self, input: TensorId, coords: TensorId) -> Result<TensorId> {
        self.expect_ndim(input, 3, "gather_horizontal_chw input")?;
        self.expect_ndim(coords, 2, "gather_horizontal_chw coords")?;
        let s = self.tensors[input.0].shape.clone();
        let cs = self.tensors[coords.0].shape.clone();
        let x4 = self.reshape(input, vec![1, s[0], s[1], s[2]])?;
        let c3 = self.reshape(coords, vec![1, cs[0], cs[1]])?;
        let y = self.gather_horizontal(x4, c3)?;
        self.reshape(y, s)
    }

    /// Sample a [A,H,W] volume along axis 0 at `coords[h,w] + o` for every
    /// integer offset o in -radius..=radius, linear interpolation with zero
    /// padding. Output is [2*radius+1, H, W].
    pub fn sample_offsets(&mut self, volume: TensorId, coords: TensorId, radius: usize) -> Result<TensorId> {
        self.expect_ndim(volume, 3, "sample_offsets volume")?;
        self.expect_ndim(coords, 2, "sample_offsets coords")?;
        let vs = self.tensors[volume.0].shape.clone();
        let cs = self.tensors[coords.0].shape.clone();
        if cs != [vs[1], vs[2]] {
            return Err(Error::contract(format!(
                "sample_offsets: coords shape {cs:?} must match volume spatial dims [{},{}]",
                vs[1], vs[2]
            )));
        }
        let data = kernels::sample_offsets(
            &self.tensors[volume.0].data,
            &vs,
            &self.tensors[coords.0].data,
            radius,
        );
        let shape = vec![2 * radius + 1, vs[1], vs[2]];
        Ok(self.record(Op::SampleOffsets { radius }, vec![volume, coords], shape, data))
    }

    // ---- correlation ---------------------------------------------------

    /// Group-wise correlation of [C,H,W] feature maps over candidate
    /// disparities 0..max_disp_q, scaled by groups/C. Output is
    /// [G, max_disp_q, H, W]; samples whose matching column falls left of the
    /// image contribute zero.
    pub fn group_corr(
        &mut self,
        f_left: TensorId,
        f_right: TensorId,
        groups: usize,
        max_disp_q: usize,
    ) -> Result<TensorId> {
        self.expect_ndim(f_left, 3, "group_corr left")?;
        self.expect_ndim(f_right, 3, "group_corr right")?;
        let ls = self.tensors[f_left.0].shape.clone();
        let rs = self.tensors[f_right.0].shape.clone();
        if ls != rs {
            return Err(Error::contract(format!("group_corr: shape mismatch {ls:?} vs {rs:?}")));
        }
        if groups == 0 || ls[0] % groups != 0 {
            return Err(Error::contract(format!(
                "group_corr: channel axis ({}) not divisible by groups ({groups})",
                ls[0]
            )));
        }
        if max_disp_q == 0 {
            return Err(Error::contract("group_corr: max_disp_q must be >= 1"));
        }
        let data = kernels::group_corr(
            &self.tensors[f_left.0].data,
            &self.tensors[f_right.0].data,
            &ls,
            groups,
            max_disp_q,
        );
        let shape = vec![groups, max_disp_q, ls[1], ls[2]];
        Ok(self.record(Op::GroupCorr { groups, max_disp_q }, vec![f_left, f_right], shape, data))
    }

    /// All-pair correlation of [C,H,W] feature maps: output [1, W, H, W]
    /// where entry (w', h, w) is the inner product of the left feature at
    /// (h, w) with the right feature at (h, w').
    pub fn allpair_corr(&mut self, f_left: TensorId, f_right: TensorId) -> Result<TensorId> {
        self.expect_ndim(f_left, 3, "allpair_corr left")?;
        self.expect_ndim(f_right, 3, "allpair_corr right")?;
        let ls = self.tensors[f_left.0].shape.clone();
        let rs = self.tensors[f_right.0].shape.clone();
        if ls != rs {
            return Err(Error::contract(format!("allpair_corr: shape mismatch {ls:?} vs {rs:?}")));
        }
        let data = kernels::allpair_corr(
            &self.tensors[f_left.0].data,
            &self.tensors[f_right.0].data,
            &ls,
        );
        let shape = vec![1, ls[2], ls[1], ls[2]];
        Ok(self.record(Op::AllPairCorr, vec![f_left, f_right], shape, data))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar loss. Visits each recorded node exactly
    /// once in reverse order; every reachable `requires_grad` tensor ends up
    /// with `grad` populated (accumulated additively across uses).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensors[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.tensors[loss.0].shape
            )));
        }
        self.tensors[loss.0].grad = Some(vec![S::one()]);
        for ni in (0..self.nodes.len()).rev() {
            let node = self.nodes[ni].clone();
            if !self.tensors[node.out.0].requires_grad {
                continue;
            }
            let Some(gout) = self.tensors[node.out.0].grad.clone() else { continue };
            self.backward_node(&node, &gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, grad: Vec<S>) {
        if !self.tensors[id.0].requires_grad {
            return;
        }
        match &mut self.tensors[id.0].grad {
            Some(g) => {
                for (dst, src) in g.iter_mut().zip(grad.iter()) {
                    *dst += *src;
                }
            }
            None => self.tensors[id.0].grad = Some(grad),
        }
    }

    fn backward_node(&mut self, node: &Node, gout: &[S]) {
        match &node.op {
            Op::Add | Op::Sub => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let na = self.tensors[a.0].data.len();
                let nb = self.tensors[b.0].data.len();
                let sign = if matches!(node.op, Op::Sub) { -S::one() } else { S::one() };
                self.accumulate(a, kernels::reduce_to(gout, na, S::one()));
                self.accumulate(b, kernels::reduce_to(gout, nb, sign));
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (da, db) = kernels::mul_bwd(gout, &self.tensors[a.0].data, &self.tensors[b.0].data);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Div => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (da, db) = kernels::div_bwd(gout, &self.tensors[a.0].data, &self.tensors[b.0].data);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Scale(c) => {
                let cs = S::of(*c);
                let g = gout.iter().map(|&g| g * cs).collect();
                self.accumulate(node.inputs[0], g);
            }
            Op::Offset(_) => {
                self.accumulate(node.inputs[0], gout.to_vec());
            }
            Op::Sigmoid => {
                let y = &self.tensors[node.out.0].data;
                let g = gout.iter().zip(y.iter()).map(|(&g, &y)| g * y * (S::one() - y)).collect();
                self.accumulate(node.inputs[0], g);
            }
            Op::Relu => {
                let x = &self.tensors[node.inputs[0].0].data;
                let g = gout
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                    .collect();
                self.accumulate(node.inputs[0], g);
            }
            Op::Abs => {
                let x = &self.tensors[node.inputs[0].0].data;
                let g = gout
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| {
                        if x > S::zero() {
                            g
                        } else if x < S::zero() {
                            -g
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                self.accumulate(node.inputs[0], g);
            }
            Op::Huber => {
                let x = &self.tensors[node.inputs[0].0].data;
                let g = gout
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| g * if x.abs() < S::one() { x } else { x.signum() })
                    .collect();
                self.accumulate(node.inputs[0], g);
            }
            Op::ClampMin(min) => {
                let m = S::of(*min);
                let x = &self.tensors[node.inputs[0].0].data;
                let g = gout
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| if x >= m { g } else { S::zero() })
                    .collect();
                self.accumulate(node.inputs[0], g);
            }
            Op::Sum => {
                let n = self.tensors[node.inputs[0].0].data.len();
                self.accumulate(node.inputs[0], vec![gout[0]; n]);
            }
            Op::MeanAxis0 => {
                let a = self.tensors[node.inputs[0].0].shape[0];
                let g = kernels::mean_axis0_bwd(gout, a);
                self.accumulate(node.inputs[0], g);
            }
            Op::Median => {
                let x = &self.tensors[node.inputs[0].0].data;
                let g = kernels::median_bwd(x, gout[0]);
                self.accumulate(node.inputs[0], g);
            }
            Op::SoftArgmax => {
                let x = &self.tensors[node.inputs[0].0].data;
                let a = self.tensors[node.inputs[0].0].shape[0];
                let g = kernels::soft_argmax_bwd(x, a, gout);
                self.accumulate(node.inputs[0], g);
            }
            Op::Reshape => {
                self.accumulate(node.inputs[0], gout.to_vec());
            }
            Op::Concat { axis } => {
                let axis = *axis;
                let out_shape = self.tensors[node.out.0].shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let sizes: Vec<usize> =
                    node.inputs.iter().map(|i| self.tensors[i.0].shape[axis]).collect();
                let grads = kernels::concat_bwd(gout, &sizes, outer, inner);
                for (&input, g) in node.inputs.iter().zip(grads) {
                    self.accumulate(input, g);
                }
            }
            Op::Conv2d { stride, padding } => {
                let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let xs = self.tensors[x.0].shape.clone();
                let ws = self.tensors[w.0].shape.clone();
                let os = self.tensors[node.out.0].shape.clone();
                let (dx, dw, db) = conv::conv2d_bwd(
                    gout,
                    &os,
                    &self.tensors[x.0].data,
                    &xs,
                    &self.tensors[w.0].data,
                    &ws,
                    *stride,
                    *padding,
                );
                self.accumulate(x, dx);
                self.accumulate(w, dw);
                self.accumulate(b, db);
            }
            Op::Conv3d { padding } => {
                let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let xs = self.tensors[x.0].shape.clone();
                let ws = self.tensors[w.0].shape.clone();
                let (dx, dw, db) = conv::conv3d_bwd(
                    gout,
                    &self.tensors[x.0].data,
                    &xs,
                    &self.tensors[w.0].data,
                    &ws,
                    *padding,
                );
                self.accumulate(x, dx);
                self.accumulate(w, dw);
                self.accumulate(b, db);
            }
            Op::Resample(mode) => {
                let s = self.tensors[node.inputs[0].0].shape.clone();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let outer: usize = s[..s.len() - 2].iter().product();
                let g = match mode {
                    ResampleMode::BilinearUp2 => kernels::bilinear_up_bwd(gout, outer, h, w, 2),
                    ResampleMode::BilinearUp4 => kernels::bilinear_up_bwd(gout, outer, h, w, 4),
                    ResampleMode::AvgPoolDown2 => kernels::avgpool2_bwd(gout, outer, h, w),
                };
                self.accumulate(node.inputs[0], g);
            }
            Op::PoolAxis0 => {
                let s = self.tensors[node.inputs[0].0].shape.clone();
                let inner: usize = s[1..].iter().product();
                let g = kernels::pool_axis0_bwd(gout, s[0], inner);
                self.accumulate(node.inputs[0], g);
            }
            Op::GatherH => {
                let (x, c) = (node.inputs[0], node.inputs[1]);
                let xs = self.tensors[x.0].shape.clone();
                let (dx, dc) =
                    kernels::gather_h_bwd(gout, &self.tensors[x.0].data, &xs, &self.tensors[c.0].data);
                self.accumulate(x, dx);
                self.accumulate(c, dc);
            }
            Op::SampleOffsets { radius } => {
                let (v, c) = (node.inputs[0], node.inputs[1]);
                let vs = self.tensors[v.0].shape.clone();
                let (dv, dc) = kernels::sample_offsets_bwd(
                    gout,
                    &self.tensors[v.0].data,
                    &vs,
                    &self.tensors[c.0].data,
                    *radius,
                );
                self.accumulate(v, dv);
                self.accumulate(c, dc);
            }
            Op::GroupCorr { groups, max_disp_q } => {
                let (l, r) = (node.inputs[0], node.inputs[1]);
                let ls = self.tensors[l.0].shape.clone();
                let (dl, dr) = kernels::group_corr_bwd(
                    gout,
                    &self.tensors[l.0].data,
                    &self.tensors[r.0].data,
                    &ls,
                    *groups,
                    *max_disp_q,
                );
                self.accumulate(l, dl);
                self.accumulate(r, dr);
            }
            Op::AllPairCorr => {
                let (l, r) = (node.inputs[0], node.inputs[1]);
                let ls = self.tensors[l.0].shape.clone();
                let (dl, dr) = kernels::allpair_corr_bwd(
                    gout,
                    &self.tensors[l.0].data,
                    &self.tensors[r.0].data,
                    &ls,
                );
                self.accumulate(l, dl);
                self.accumulate(r, dr);
            }
        }
    }
}
