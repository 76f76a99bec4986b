//! Reverse-mode autodiff over eagerly evaluated f64 tensors.
//!
//! A [`Tape`] records every operation as it runs. Values are `ArrayD<f64>`;
//! backward passes walk the record in reverse and accumulate gradients for
//! every node that (transitively) depends on a gradient-tracked leaf.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};

use super::kernels;

/// Handle to one value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Per-op backward rule. `inputs` are the recorded parent values and
/// `output` the recorded result of the forward pass.
pub(crate) trait Backward {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        output: &ArrayD<f64>,
    ) -> Vec<ArrayD<f64>>;
}

struct Node {
    value: ArrayD<f64>,
    parents: Vec<TensorId>,
    backward: Option<Box<dyn Backward>>,
    needs_grad: bool,
    kind: &'static str,
}

/// Gradients produced by [`Tape::backward`], indexed by [`TensorId`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&ArrayD<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf value. Gradients flow into it only when `needs_grad`.
    pub fn leaf(&mut self, value: ArrayD<f64>, needs_grad: bool) -> TensorId {
        self.push("leaf", value, vec![], None, needs_grad)
    }

    /// Record a value that never receives gradients.
    pub fn constant(&mut self, value: ArrayD<f64>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        *self.value(id).first().expect("scalar node")
    }

    pub fn needs_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub(crate) fn push(
        &mut self,
        kind: &'static str,
        value: ArrayD<f64>,
        parents: Vec<TensorId>,
        backward: Option<Box<dyn Backward>>,
        leaf_needs_grad: bool,
    ) -> TensorId {
        let needs_grad = if backward.is_some() {
            parents.iter().any(|p| self.nodes[p.0].needs_grad)
        } else {
            leaf_needs_grad
        };
        self.nodes.push(Node {
            value,
            parents,
            backward,
            needs_grad,
            kind,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Record an op with explicit parents and backward rule.
    pub(crate) fn op(
        &mut self,
        kind: &'static str,
        value: ArrayD<f64>,
        parents: Vec<TensorId>,
        backward: Box<dyn Backward>,
    ) -> TensorId {
        self.push(kind, value, parents, Some(backward), false)
    }

    /// Count recorded ops of one kind; lets tests assert structural facts
    /// about an executed graph (e.g. which activation was used).
    pub fn count_ops(&self, kind: &str) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    /// Kinds of all recorded ops between two tape positions.
    pub fn op_kinds_since(&self, mark: usize) -> Vec<&'static str> {
        self.nodes[mark..].iter().map(|n| n.kind).collect()
    }

    /// Reverse sweep from `root`, which must be scalar. Returns gradients for
    /// every node reachable from a gradient-tracked leaf.
    pub fn backward(&self, root: TensorId) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), 1.0));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let node = &self.nodes[i];
            let Some(bw) = &node.backward else { continue };
            let grad = grads[i].take().unwrap();
            let inputs: Vec<&ArrayD<f64>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = bw.backward(&grad, &inputs, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
            grads[i] = Some(grad);
        }
        Gradients { grads }
    }
}

fn dyn4(v: &ArrayD<f64>) -> Array4<f64> {
    v.view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("rank-4 tensor")
        .to_owned()
}

fn dyn2(v: &ArrayD<f64>) -> Array2<f64> {
    v.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("rank-2 tensor")
        .to_owned()
}

fn dyn1(v: &ArrayD<f64>) -> Array1<f64> {
    v.view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("rank-1 tensor")
        .to_owned()
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

struct Conv2dBw {
    stride: usize,
    pad: usize,
    has_bias: bool,
}

impl Backward for Conv2dBw {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
    ) -> Vec<ArrayD<f64>> {
        let gy = dyn4(grad);
        let x = dyn4(inputs[0]);
        let w = dyn4(inputs[1]);
        let (_, _, h, wd) = x.dim();
        let k = w.shape()[2];
        let gx = kernels::conv2d_grad_input(&w.view(), &gy.view(), h, wd, self.stride, self.pad);
        let gw = kernels::conv2d_grad_weight(&x.view(), &gy.view(), k, self.stride, self.pad);
        let mut out = vec![gx.into_dyn(), gw.into_dyn()];
        if self.has_bias {
            out.push(kernels::conv2d_grad_bias(&gy.view()).into_dyn());
        }
        out
    }
}

struct ConvTranspose2dBw {
    stride: usize,
    pad: usize,
    has_bias: bool,
}

impl Backward for ConvTranspose2dBw {
    fn backward(
        &self,
        grad: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
    ) -> Vec<ArrayD<f64>> {
        let gy = dyn4(grad);
        let x = dyn4(inputs[0]);
        let w = dyn4(inputs[1]);
        let k = w.shape()[2];
        let gx = kernels::conv2d_transpose_grad_input(&w.view(), &gy.view(), self.stride, self.pad);
        let gw = kernels::conv2d_transpose_grad_weight(
            &x.view(),
            &gy.view(),
            k,
            self.stride,
            self.pad,
        );
        let mut out = vec![gx.into_dyn(), gw.into_dyn()];
        if self.has_bias {
            out.push(kernels::conv2d_grad_bias(&gy.view()).into_dyn());
        }
        out
    }
}

// ---------------------------------------------------------------------------
// elementwise / arithmetic
// ---------------------------------------------------------------------------

struct SiluBw;
impl Backward for SiluBw {
    fn backward(&self, grad: &ArrayD<f64>, inputs: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![grad * &inputs[0].mapv(kernels::silu_grad)]
    }
}

struct ReluBw;
impl Backward for ReluBw {
    fn backward(&self, grad: &ArrayD<f64>, inputs: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![grad * &inputs[0].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })]
    }
}

struct SigmoidBw;
impl Backward for SigmoidBw {
    fn backward(&self, grad: &ArrayD<f64>, _i: &[&ArrayD<f64>], output: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![grad * &output.mapv(|s| s * (1.0 - s))]
    }
}

struct AddBw;
impl Backward for AddBw {
    fn backward(&self, grad: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![grad.clone(), grad.clone()]
    }
}

/// x: (N,C,H,W) scaled per channel by g: (N,C).
struct MulChannelBw;
impl Backward for MulChannelBw {
    fn backward(&self, grad: &ArrayD<f64>, inputs: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let x = dyn4(inputs[0]);
        let g = dyn2(inputs[1]);
        let gy = dyn4(grad);
        let (n, c, h, w) = x.dim();
        let mut gx = Array4::<f64>::zeros((n, c, h, w));
        let mut gg = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let gyp = gy.slice(ndarray::s![ni, ci, .., ..]);
                let xp = x.slice(ndarray::s![ni, ci, .., ..]);
                gx.slice_mut(ndarray::s![ni, ci, .., ..])
                    .assign(&gyp.mapv(|v| v * g[(ni, ci)]));
                gg[(ni, ci)] = (&gyp * &xp).sum();
            }
        }
        vec![gx.into_dyn(), gg.into_dyn()]
    }
}

/// x: (N,...) scaled by a fixed per-sample factor (stochastic depth mask).
struct MulSampleBw {
    factors: Vec<f64>,
}
impl Backward for MulSampleBw {
    fn backward(&self, grad: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let mut gx = grad.clone();
        for (ni, f) in self.factors.iter().enumerate() {
            gx.index_axis_mut(Axis(0), ni).mapv_inplace(|v| v * f);
        }
        vec![gx]
    }
}

struct ScaleBw {
    factor: f64,
}
impl Backward for ScaleBw {
    fn backward(&self, grad: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![grad.mapv(|v| v * self.factor)]
    }
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

struct ReshapeBw;
impl Backward for ReshapeBw {
    fn backward(&self, grad: &ArrayD<f64>, inputs: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let shape = inputs[0].raw_dim();
        vec![grad
            .to_shape(shape)
            .expect("reshape backward")
            .to_owned()]
    }
}

/// (N, A*C, H, W) -> (N, H*W*A, C): anchors vary fastest within a cell.
struct FlattenPredBw {
    anchors: usize,
}
impl Backward for FlattenPredBw {
    fn backward(&self, grad: &ArrayD<f64>, inputs: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let x = dyn4(inputs[0]);
        let (n, ac, h, w) = x.dim();
        let c = ac / self.anchors;
        let g = grad
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("rank-3 grad");
        let mut gx = Array4::<f64>::zeros((n, ac, h, w));
        for ni in 0..n {
            for a in 0..self.anchors {
                for ci in 0..c {
                    for yi in 0..h {
                        for xi in 0..w {
                            let row = (yi * w + xi) * self.anchors + a;
                            gx[(ni, a * c + ci, yi, xi)] = g[(ni, row, ci)];
                        }
                    }
                }
            }
        }
        vec![gx.into_dyn()]
    }
}

/// Concatenate along axis 1 (rank-3 inputs).
struct ConcatAxis1Bw {
    sizes: Vec<usize>,
}
impl Backward for ConcatAxis1Bw {
    fn backward(&self, grad: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let mut out = Vec::with_capacity(self.sizes.len());
        let mut start = 0;
        for &len in &self.sizes {
            out.push(
                grad.slice_axis(Axis(1), ndarray::Slice::from(start..start + len))
                    .to_owned(),
            );
            start += len;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// pooling / resampling / normalization
// ---------------------------------------------------------------------------

struct MaxPoolBw {
    arg: Array4<usize>,
    in_h: usize,
    in_w: usize,
}
impl Backward for MaxPoolBw {
    fn backward(&self, grad: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let gy = dyn4(grad);
        vec![kernels::maxpool2d_grad(&gy.view(), &self.arg, self.in_h, self.in_w).into_dyn()]
    }
}

struct GapBw;
impl Backward for GapBw {
    fn backward(&self, grad: &ArrayD<f64>, inputs: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let x = dyn4(inputs[0]);
        let (n, c, h, w) = x.dim();
        let g = dyn2(grad);
        let scale = 1.0 / (h * w) as f64;
        let mut gx = Array4::<f64>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                gx.slice_mut(ndarray::s![ni, ci, .., ..])
                    .fill(g[(ni, ci)] * scale);
            }
        }
        vec![gx.into_dyn()]
    }
}

struct UpsampleBw;
impl Backward for UpsampleBw {
    fn backward(&self, grad: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let gy = dyn4(grad);
        vec![kernels::upsample_nearest2_grad(&gy.view()).into_dyn()]
    }
}

struct BatchNormBw {
    mean: Array1<f64>,
    var: Array1<f64>,
    eps: f64,
    train_stats: bool,
}
impl Backward for BatchNormBw {
    fn backward(&self, grad: &ArrayD<f64>, inputs: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let x = dyn4(inputs[0]);
        let gamma = dyn1(inputs[1]);
        let gy = dyn4(grad);
        let (gx, dgamma, dbeta) = if self.train_stats {
            kernels::batchnorm_train_grad(&x.view(), &gy.view(), &self.mean, &self.var, &gamma, self.eps)
        } else {
            kernels::batchnorm_eval_grad(&x.view(), &gy.view(), &self.mean, &self.var, &gamma, self.eps)
        };
        vec![gx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
    }
}

struct LinearBw;
impl Backward for LinearBw {
    fn backward(&self, grad: &ArrayD<f64>, inputs: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let x = dyn2(inputs[0]);
        let w = dyn2(inputs[1]);
        let gy = dyn2(grad);
        let gx = gy.dot(&w);
        let gw = gy.t().dot(&x);
        let mut out = vec![gx.into_dyn(), gw.into_dyn()];
        if inputs.len() == 3 {
            out.push(gy.sum_axis(Axis(0)).into_dyn());
        }
        out
    }
}

struct RoiAlignBw {
    rois: Vec<kernels::RoiRef>,
    feat_dim: (usize, usize, usize, usize),
}
impl Backward for RoiAlignBw {
    fn backward(&self, grad: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let gy = dyn4(grad);
        vec![kernels::roi_align_grad(&gy.view(), &self.rois, self.feat_dim).into_dyn()]
    }
}

/// Row gather along axis 0; backward scatter-adds into the source rows.
struct GatherRowsBw {
    indices: Vec<usize>,
}
impl Backward for GatherRowsBw {
    fn backward(&self, grad: &ArrayD<f64>, inputs: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let mut gx = ArrayD::<f64>::zeros(inputs[0].raw_dim());
        for (k, &i) in self.indices.iter().enumerate() {
            let mut row = gx.index_axis_mut(Axis(0), i);
            row += &grad.index_axis(Axis(0), k);
        }
        vec![gx]
    }
}

/// Multi-level ROI extraction: rois are grouped per source level, cropped
/// with `roi_align`, and scattered back into the original roi order.
struct RoiMultiBw {
    per_level: Vec<(Vec<kernels::RoiRef>, Vec<usize>)>,
    feat_dims: Vec<(usize, usize, usize, usize)>,
}
impl Backward for RoiMultiBw {
    fn backward(&self, grad: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let gy = dyn4(grad);
        let mut out = Vec::with_capacity(self.per_level.len());
        for (li, (rois, rows)) in self.per_level.iter().enumerate() {
            let (_, c, _, _) = self.feat_dims[li];
            let s = gy.shape()[2];
            let mut gl = Array4::<f64>::zeros((rois.len(), c, s, s));
            for (k, &row) in rows.iter().enumerate() {
                gl.index_axis_mut(Axis(0), k)
                    .assign(&gy.index_axis(Axis(0), row));
            }
            out.push(kernels::roi_align_grad(&gl.view(), rois, self.feat_dims[li]).into_dyn());
        }
        out
    }
}

struct SumScalarsBw {
    weights: Vec<f64>,
}
impl Backward for SumScalarsBw {
    fn backward(&self, grad: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let g = *grad.first().unwrap();
        self.weights
            .iter()
            .map(|w| ArrayD::from_elem(IxDyn(&[]), g * w))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// tape op builders
// ---------------------------------------------------------------------------

impl Tape {
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let xv = dyn4(self.value(x));
        let wv = dyn4(self.value(w));
        let bv = b.map(|bid| dyn1(self.value(bid)));
        let y = kernels::conv2d(&xv.view(), &wv.view(), bv.as_ref(), stride, pad);
        let mut parents = vec![x, w];
        if let Some(bid) = b {
            parents.push(bid);
        }
        self.op(
            "conv2d",
            y.into_dyn(),
            parents,
            Box::new(Conv2dBw { stride, pad, has_bias: b.is_some() }),
        )
    }

    pub fn conv2d_transpose(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> TensorId {
        let xv = dyn4(self.value(x));
        let wv = dyn4(self.value(w));
        let bv = b.map(|bid| dyn1(self.value(bid)));
        let y = kernels::conv2d_transpose(&xv.view(), &wv.view(), bv.as_ref(), stride, pad, output_pad);
        let mut parents = vec![x, w];
        if let Some(bid) = b {
            parents.push(bid);
        }
        self.op(
            "conv2d_transpose",
            y.into_dyn(),
            parents,
            Box::new(ConvTranspose2dBw { stride, pad, has_bias: b.is_some() }),
        )
    }

    pub fn silu(&mut self, x: TensorId) -> TensorId {
        let y = self.value(x).mapv(kernels::silu);
        self.op("silu", y, vec![x], Box::new(SiluBw))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let y = self.value(x).mapv(|v| v.max(0.0));
        self.op("relu", y, vec![x], Box::new(ReluBw))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let y = self.value(x).mapv(kernels::sigmoid);
        self.op("sigmoid", y, vec![x], Box::new(SigmoidBw))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let y = self.value(a) + self.value(b);
        self.op("add", y, vec![a, b], Box::new(AddBw))
    }

    /// Scale (N,C,H,W) features by a per-channel gate of shape (N,C).
    pub fn mul_channel(&mut self, x: TensorId, gate: TensorId) -> TensorId {
        let xv = dyn4(self.value(x));
        let gv = dyn2(self.value(gate));
        let (n, c, h, w) = xv.dim();
        let mut y = Array4::<f64>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let src = xv.slice(ndarray::s![ni, ci, .., ..]);
                y.slice_mut(ndarray::s![ni, ci, .., ..])
                    .assign(&src.mapv(|v| v * gv[(ni, ci)]));
            }
        }
        self.op("mul_channel", y.into_dyn(), vec![x, gate], Box::new(MulChannelBw))
    }

    /// Scale each sample along axis 0 by a fixed factor (no gradient into the
    /// factors; used for stochastic-depth masks).
    pub fn mul_sample(&mut self, x: TensorId, factors: Vec<f64>) -> TensorId {
        let mut y = self.value(x).clone();
        assert_eq!(y.shape()[0], factors.len());
        for (ni, f) in factors.iter().enumerate() {
            y.index_axis_mut(Axis(0), ni).mapv_inplace(|v| v * f);
        }
        self.op("mul_sample", y, vec![x], Box::new(MulSampleBw { factors }))
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let y = self.value(x).mapv(|v| v * factor);
        self.op("scale", y, vec![x], Box::new(ScaleBw { factor }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        let y = self
            .value(x)
            .to_shape(IxDyn(shape))
            .expect("reshape")
            .to_owned();
        self.op("reshape", y, vec![x], Box::new(ReshapeBw))
    }

    /// (N, A*C, H, W) -> (N, H*W*A, C) placing anchors fastest within a cell.
    pub fn flatten_predictions(&mut self, x: TensorId, anchors: usize) -> TensorId {
        let xv = dyn4(self.value(x));
        let (n, ac, h, w) = xv.dim();
        assert_eq!(ac % anchors, 0, "channels not divisible by anchor count");
        let c = ac / anchors;
        let mut y = ndarray::Array3::<f64>::zeros((n, h * w * anchors, c));
        for ni in 0..n {
            for a in 0..anchors {
                for ci in 0..c {
                    for yi in 0..h {
                        for xi in 0..w {
                            y[(ni, (yi * w + xi) * anchors + a, ci)] = xv[(ni, a * c + ci, yi, xi)];
                        }
                    }
                }
            }
        }
        self.op("flatten_predictions", y.into_dyn(), vec![x], Box::new(FlattenPredBw { anchors }))
    }

    /// Concatenate rank-3 tensors along axis 1.
    pub fn concat_axis1(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("concat axis 1");
        let sizes = parts.iter().map(|p| self.value(*p).shape()[1]).collect();
        self.op("concat_axis1", y, parts.to_vec(), Box::new(ConcatAxis1Bw { sizes }))
    }

    pub fn maxpool2d(&mut self, x: TensorId, k: usize, stride: usize, pad: usize) -> TensorId {
        let xv = dyn4(self.value(x));
        let (_, _, h, w) = xv.dim();
        let (y, arg) = kernels::maxpool2d(&xv.view(), k, stride, pad);
        self.op(
            "maxpool2d",
            y.into_dyn(),
            vec![x],
            Box::new(MaxPoolBw { arg, in_h: h, in_w: w }),
        )
    }

    pub fn global_avg_pool(&mut self, x: TensorId) -> TensorId {
        let xv = dyn4(self.value(x));
        let y = kernels::global_avg_pool(&xv.view());
        self.op("global_avg_pool", y.into_dyn(), vec![x], Box::new(GapBw))
    }

    pub fn upsample_nearest2(&mut self, x: TensorId) -> TensorId {
        let xv = dyn4(self.value(x));
        let y = kernels::upsample_nearest2(&xv.view());
        self.op("upsample_nearest2", y.into_dyn(), vec![x], Box::new(UpsampleBw))
    }

    /// Batch normalization. With `stats = None` the batch statistics are
    /// computed here (train mode) and returned; otherwise the provided
    /// (running) statistics are used and gradients treat them as constants.
    pub fn batchnorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: Option<(Array1<f64>, Array1<f64>)>,
        eps: f64,
    ) -> (TensorId, Array1<f64>, Array1<f64>) {
        let xv = dyn4(self.value(x));
        let train_stats = stats.is_none();
        let (mean, var) = stats.unwrap_or_else(|| kernels::batch_stats(&xv.view()));
        let g = dyn1(self.value(gamma));
        let b = dyn1(self.value(beta));
        let y = kernels::batchnorm_apply(&xv.view(), &mean, &var, &g, &b, eps);
        let id = self.op(
            "batchnorm",
            y.into_dyn(),
            vec![x, gamma, beta],
            Box::new(BatchNormBw {
                mean: mean.clone(),
                var: var.clone(),
                eps,
                train_stats,
            }),
        );
        (id, mean, var)
    }

    pub fn linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> TensorId {
        let xv = dyn2(self.value(x));
        let wv = dyn2(self.value(w));
        let bv = b.map(|bid| dyn1(self.value(bid)));
        let y = kernels::linear(&xv, &wv, bv.as_ref());
        let mut parents = vec![x, w];
        if let Some(bid) = b {
            parents.push(bid);
        }
        self.op("linear", y.into_dyn(), parents, Box::new(LinearBw))
    }

    pub fn roi_align(&mut self, feat: TensorId, rois: Vec<kernels::RoiRef>, out: usize) -> TensorId {
        let fv = dyn4(self.value(feat));
        let y = kernels::roi_align(&fv.view(), &rois, out);
        let feat_dim = fv.dim();
        self.op(
            "roi_align",
            y.into_dyn(),
            vec![feat],
            Box::new(RoiAlignBw { rois, feat_dim }),
        )
    }

    /// Select rows along axis 0 (duplicates allowed).
    pub fn gather_rows(&mut self, x: TensorId, indices: &[usize]) -> TensorId {
        let y = self.value(x).select(Axis(0), indices);
        self.op(
            "gather_rows",
            y,
            vec![x],
            Box::new(GatherRowsBw { indices: indices.to_vec() }),
        )
    }

    /// Crop every roi from its assigned source level. `rois` carry image
    /// coordinates; `strides[assignment[i]]` converts roi `i` into the pixel
    /// units of its level. Output rows follow the input roi order.
    pub fn roi_extract_multi(
        &mut self,
        levels: &[TensorId],
        strides: &[usize],
        rois: &[(usize, [f64; 4])],
        assignment: &[usize],
        out: usize,
    ) -> TensorId {
        assert_eq!(levels.len(), strides.len());
        assert_eq!(rois.len(), assignment.len());
        let feat_dims: Vec<(usize, usize, usize, usize)> = levels
            .iter()
            .map(|l| {
                let s = self.value(*l).shape();
                (s[0], s[1], s[2], s[3])
            })
            .collect();
        let c = feat_dims.first().map(|d| d.1).unwrap_or(0);
        let mut per_level: Vec<(Vec<kernels::RoiRef>, Vec<usize>)> =
            vec![(Vec::new(), Vec::new()); levels.len()];
        for (i, ((batch, b), &li)) in rois.iter().zip(assignment).enumerate() {
            let s = strides[li] as f64;
            per_level[li].0.push(kernels::RoiRef {
                batch: *batch,
                ymin: b[0] / s,
                xmin: b[1] / s,
                ymax: b[2] / s,
                xmax: b[3] / s,
            });
            per_level[li].1.push(i);
        }
        let mut y = Array4::<f64>::zeros((rois.len(), c, out, out));
        for (li, (lrois, rows)) in per_level.iter().enumerate() {
            if lrois.is_empty() {
                continue;
            }
            let fv = dyn4(self.value(levels[li]));
            let crops = kernels::roi_align(&fv.view(), lrois, out);
            for (k, &row) in rows.iter().enumerate() {
                y.index_axis_mut(Axis(0), row)
                    .assign(&crops.index_axis(Axis(0), k));
            }
        }
        self.op(
            "roi_extract_multi",
            y.into_dyn(),
            levels.to_vec(),
            Box::new(RoiMultiBw { per_level, feat_dims }),
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn sum_scalars(&mut self, terms: &[(TensorId, f64)]) -> TensorId {
        assert!(!terms.is_empty());
        let total: f64 = terms
            .iter()
            .map(|(id, w)| self.scalar_value(*id) * w)
            .sum();
        let parents = terms.iter().map(|(id, _)| *id).collect();
        let weights = terms.iter().map(|(_, w)| *w).collect();
        self.op(
            "sum_scalars",
            ArrayD::from_elem(IxDyn(&[]), total),
            parents,
            Box::new(SumScalarsBw { weights }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        Array::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// FD-check a scalar-valued tape program w.r.t. one leaf.
    fn check_program(
        build: &dyn Fn(&mut Tape, TensorId) -> TensorId,
        x0: &ArrayD<f64>,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let y = build(&mut tape, x);
        let grads = tape.backward(y);
        let gx = grads.get(x).expect("leaf grad").clone();

        let eps = 1e-6;
        let mut xp = x0.clone();
        for i in 0..x0.len() {
            let orig = xp.as_slice_mut().unwrap()[i];
            xp.as_slice_mut().unwrap()[i] = orig + eps;
            let mut t1 = Tape::new();
            let l1 = t1.leaf(xp.clone(), false);
            let y1 = build(&mut t1, l1);
            let fp = t1.scalar_value(y1);
            xp.as_slice_mut().unwrap()[i] = orig - eps;
            let mut t2 = Tape::new();
            let l2 = t2.leaf(xp.clone(), false);
            let y2 = build(&mut t2, l2);
            let fm = t2.scalar_value(y2);
            xp.as_slice_mut().unwrap()[i] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let an = gx.as_slice().unwrap()[i];
            let denom = fd.abs().max(an.abs()).max(1.0);
            assert!(
                (fd - an).abs() / denom < tol,
                "coord {i}: analytic {an} vs fd {fd}"
            );
        }
    }

    fn sum_to_scalar(tape: &mut Tape, x: TensorId) -> TensorId {
        // reduce via global sum: reshape to (1, len) then linear with ones
        let len = tape.value(x).len();
        let flat = tape.reshape(x, &[1, len]);
        let ones = tape.constant(ArrayD::from_elem(IxDyn(&[1, len]), 1.0));
        let y = tape.linear(flat, ones, None);
        tape.reshape(y, &[])
    }

    #[test]
    fn silu_sigmoid_relu_chain_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x0 = randn(&mut rng, &[2, 3]);
        check_program(
            &|t, x| {
                let a = t.silu(x);
                let b = t.sigmoid(a);
                sum_to_scalar(t, b)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn residual_add_and_channel_gate_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = randn(&mut rng, &[2, 3, 4, 4]);
        check_program(
            &|t, x| {
                let gap = t.global_avg_pool(x);
                let gate = t.sigmoid(gap);
                let gated = t.mul_channel(x, gate);
                let res = t.add(gated, x);
                sum_to_scalar(t, res)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn conv_bn_pool_stack_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x0 = randn(&mut rng, &[2, 2, 6, 6]);
        let w0 = randn(&mut rng, &[3, 2, 3, 3]);
        check_program(
            &|t, x| {
                let w = t.constant(w0.clone());
                let gamma = t.constant(arr1(&[1.0, 1.1, 0.9]).into_dyn());
                let beta = t.constant(arr1(&[0.0, 0.1, -0.1]).into_dyn());
                let c = t.conv2d(x, w, None, 1, 1);
                let (bn, _, _) = t.batchnorm(c, gamma, beta, None, 1e-3);
                let a = t.silu(bn);
                let p = t.maxpool2d(a, 3, 2, 1);
                sum_to_scalar(t, p)
            },
            &x0,
            1e-4,
        );
    }

    #[test]
    fn shared_weight_gradients_accumulate() {
        // One weight leaf used twice: grad must be the sum of both uses.
        let mut tape = Tape::new();
        let w = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 2]), 1.5), true);
        let x1 = tape.constant(ArrayD::from_elem(IxDyn(&[1, 2]), 2.0));
        let x2 = tape.constant(ArrayD::from_elem(IxDyn(&[1, 2]), 3.0));
        let y1 = tape.linear(x1, w, None);
        let y2 = tape.linear(x2, w, None);
        let tot = tape.add(y1, y2);
        let s = tape.reshape(tot, &[]);
        let grads = tape.backward(s);
        let gw = grads.get(w).unwrap();
        assert_eq!(gw.as_slice().unwrap(), &[5.0, 5.0]);
    }

    #[test]
    fn flatten_predictions_layout_and_grad() {
        // 2 anchors, 3 classes, 2x2 grid
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = randn(&mut rng, &[1, 6, 2, 2]);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let y = tape.flatten_predictions(x, 2);
        assert_eq!(tape.value(y).shape(), &[1, 8, 3]);
        // cell (0,1), anchor 1, class 2 lives at channel 1*3+2=5
        let expect = x0[[0, 5, 0, 1]];
        assert_eq!(tape.value(y)[[0, 1 * 2 + 1, 2]], expect);
        check_program(
            &|t, x| {
                let f = t.flatten_predictions(x, 2);
                sum_to_scalar(t, f)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn concat_axis1_roundtrip_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x0 = randn(&mut rng, &[1, 4, 3]);
        check_program(
            &|t, x| {
                let other = t.constant(ArrayD::from_elem(IxDyn(&[1, 2, 3]), 0.5));
                let c = t.concat_axis1(&[x, other]);
                sum_to_scalar(t, c)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn upsample_conv_transpose_roi_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x0 = randn(&mut rng, &[1, 2, 4, 4]);
        let wt0 = randn(&mut rng, &[2, 2, 3, 3]);
        let rois = vec![kernels::RoiRef { batch: 0, ymin: 0.5, xmin: 1.0, ymax: 6.0, xmax: 7.5 }];
        check_program(
            &|t, x| {
                let up = t.upsample_nearest2(x);
                let wt = t.constant(wt0.clone());
                let dc = t.conv2d_transpose(up, wt, None, 2, 1, 1);
                let r = t.roi_align(dc, rois.clone(), 3);
                sum_to_scalar(t, r)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn sum_scalars_weights() {
        let mut tape = Tape::new();
        let a = tape.leaf(ArrayD::from_elem(IxDyn(&[]), 2.0), true);
        let b = tape.leaf(ArrayD::from_elem(IxDyn(&[]), 3.0), true);
        let s = tape.sum_scalars(&[(a, 1.0), (b, 0.5)]);
        assert!((tape.scalar_value(s) - 3.5).abs() < 1e-12);
        let g = tape.backward(s);
        assert_eq!(*g.get(a).unwrap().first().unwrap(), 1.0);
        assert_eq!(*g.get(b).unwrap().first().unwrap(), 0.5);
    }

    #[test]
    fn eval_mode_batchnorm_uses_given_stats() {
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 3.0));
        let gamma = tape.constant(arr1(&[2.0]).into_dyn());
        let beta = tape.constant(arr1(&[1.0]).into_dyn());
        let (y, _, _) = tape.batchnorm(
            x,
            gamma,
            beta,
            Some((arr1(&[1.0]), arr1(&[4.0]))),
            0.0,
        );
        // (3-1)/2 * 2 + 1 = 3
        assert!((tape.value(y)[[0, 0, 0, 0]] - 3.0).abs() < 1e-12);
    }
}
