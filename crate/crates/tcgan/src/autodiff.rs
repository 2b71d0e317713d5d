//! Reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Graph`] is a tape of operations built per forward pass. Values are
//! dynamic-dimension arrays shared via `Arc`, so inserting a parameter leaf
//! never copies it. `backward` walks the tape in reverse and returns one
//! gradient per node that requires one; gradient branches whose leaf does not
//! require a gradient are skipped entirely, which is what lets the generator
//! phase backpropagate through a frozen discriminator without paying for its
//! weight gradients.
//!
//! The op set is exactly what the networks and losses here need: conv /
//! transposed conv (stride 1 or 2, zero or reflection padding), instance
//! normalization, pointwise activations, and scalar reductions. Convolutions
//! lower to im2col plus a product on the in-crate [`crate::gemm`] kernels.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};

use crate::gemm;

/// Element type of the differentiable substrate. Training runs in `f32`;
/// gradient verification runs in `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shorthand for a float literal in generic code.
pub(crate) fn lit<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("literal representable")
}

/// Variance floor used by instance normalization.
pub const INSTANCE_NORM_EPS: f64 = 1e-6;

// ---- temporary profiling shim (to be removed) ---------------------------
pub mod optime {
    use std::cell::RefCell;
    use std::collections::BTreeMap;
    use std::time::{Duration, Instant};

    thread_local! {
        static BUCKETS: RefCell<BTreeMap<&'static str, (Duration, u64)>> =
            RefCell::new(BTreeMap::new());
    }

    pub struct Timer(&'static str, Instant);

    pub fn start(name: &'static str) -> Timer {
        Timer(name, Instant::now())
    }

    pub fn start_dyn(name: String) -> Timer {
        thread_local! {
            static INTERN: RefCell<std::collections::HashMap<String, &'static str>> =
                RefCell::new(std::collections::HashMap::new());
        }
        let s = INTERN.with(|m| {
            *m.borrow_mut()
                .entry(name.clone())
                .or_insert_with(|| Box::leak(name.into_boxed_str()))
        });
        Timer(s, Instant::now())
    }

    impl Drop for Timer {
        fn drop(&mut self) {
            let el = self.1.elapsed();
            BUCKETS.with(|b| {
                let mut b = b.borrow_mut();
                let e = b.entry(self.0).or_insert((Duration::ZERO, 0));
                e.0 += el;
                e.1 += 1;
            });
        }
    }

    pub fn dump_and_reset() {
        BUCKETS.with(|b| {
            let mut b = b.borrow_mut();
            let mut rows: Vec<_> = b.iter().map(|(k, v)| (*k, *v)).collect();
            rows.sort_by(|a, b| b.1 .0.cmp(&a.1 .0));
            for (name, (d, n)) in rows {
                println!("  {name:<28} {:>10.3}ms  n={n}", d.as_secs_f64() * 1e3);
            }
            b.clear();
        });
    }
}
// -------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

enum Op<F: Scalar> {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Scale(VarId, F),
    AddScalar(VarId, F),
    Square(VarId),
    Abs(VarId),
    Relu(VarId),
    LeakyRelu(VarId, F),
    Tanh(VarId),
    Sigmoid(VarId),
    Softplus(VarId),
    Mean(VarId),
    ChannelMean(VarId),
    Affine {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    WeightedSum(Vec<(VarId, F)>),
    Conv2d {
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
        mode: PadMode,
        /// Forward-pass column matrix, kept only when the weight gradient
        /// will be needed so the backward pass does not rebuild it.
        col: Option<Array2<F>>,
    },
    ConvTranspose2d {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    InstanceNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        normalized: ArrayD<F>,
        inv_std: Array1<F>,
    },
}

struct Node<F: Scalar> {
    value: Arc<ArrayD<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients keyed by the node ids of one graph.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: VarId) -> Option<&ArrayD<F>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node that is known to require one.
    pub fn expect(&self, id: VarId) -> &ArrayD<F> {
        self.grads[id.0]
            .as_ref()
            .expect("gradient requested for a node that none was computed for")
    }

    /// Moves a gradient out, leaving `None`; avoids copying large tensors
    /// when the caller owns the rest of the accumulation.
    pub fn take(&mut self, id: VarId) -> Option<ArrayD<F>> {
        self.grads[id.0].take()
    }
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    /// Reads a 0-d node back as a plain scalar.
    pub fn scalar(&self, id: VarId) -> F {
        let v = self.value(id);
        debug_assert_eq!(v.ndim(), 0, "scalar() on a non-scalar node");
        *v.iter().next().expect("scalar node is non-empty")
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Inserts a shared tensor as a leaf without copying it.
    pub fn leaf(&mut self, value: Arc<ArrayD<F>>, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add: shape mismatch"
        );
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "sub: shape mismatch"
        );
        let v = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, x: VarId, c: F) -> VarId {
        let v = self.value(x).mapv(|t| t * c);
        let ng = self.needs(x);
        self.push(v, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: VarId, c: F) -> VarId {
        let v = self.value(x).mapv(|t| t + c);
        let ng = self.needs(x);
        self.push(v, Op::AddScalar(x, c), ng)
    }

    pub fn square(&mut self, x: VarId) -> VarId {
        let v = self.value(x).mapv(|t| t * t);
        let ng = self.needs(x);
        self.push(v, Op::Square(x), ng)
    }

    pub fn abs(&mut self, x: VarId) -> VarId {
        let v = self.value(x).mapv(|t| t.abs());
        let ng = self.needs(x);
        self.push(v, Op::Abs(x), ng)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let v = self.value(x).mapv(|t| t.max(F::zero()));
        let ng = self.needs(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: F) -> VarId {
        let v = self
            .value(x)
            .mapv(|t| if t > F::zero() { t } else { t * slope });
        let ng = self.needs(x);
        self.push(v, Op::LeakyRelu(x, slope), ng)
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let v = self.value(x).mapv(|t| t.tanh());
        let ng = self.needs(x);
        self.push(v, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let v = self.value(x).mapv(sigmoid_stable);
        let ng = self.needs(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn softplus(&mut self, x: VarId) -> VarId {
        let v = self.value(x).mapv(softplus_stable);
        let ng = self.needs(x);
        self.push(v, Op::Softplus(x), ng)
    }

    /// Mean over all elements, producing a 0-d scalar node.
    pub fn mean(&mut self, x: VarId) -> VarId {
        let n = lit::<F>(self.value(x).len() as f64);
        let total: F = self.value(x).iter().copied().sum();
        let v = ArrayD::from_elem(IxDyn(&[]), total / n);
        let ng = self.needs(x);
        self.push(v, Op::Mean(x), ng)
    }

    /// Global average pooling: `(C, H, W)` to `(C,)`.
    pub fn channel_mean(&mut self, x: VarId) -> VarId {
        let a = as3(self.value(x));
        let (c, h, w) = a.dim();
        let n = lit::<F>((h * w) as f64);
        let mut out = Array1::<F>::zeros(c);
        for ci in 0..c {
            out[ci] = a.index_axis(Axis(0), ci).iter().copied().sum::<F>() / n;
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::ChannelMean(x), ng)
    }

    /// Dot product plus bias: `(C,) x (C,) + () -> ()`.
    pub fn affine(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(x).shape(), self.value(w).shape(), "affine: shapes");
        assert_eq!(self.value(b).ndim(), 0, "affine: bias must be scalar");
        let dot: F = self
            .value(x)
            .iter()
            .zip(self.value(w).iter())
            .map(|(a, b)| *a * *b)
            .sum();
        let v = ArrayD::from_elem(IxDyn(&[]), dot + self.scalar(b));
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(v, Op::Affine { x, w, b }, ng)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(VarId, F)]) -> VarId {
        let mut total = F::zero();
        let mut ng = false;
        for (id, c) in terms {
            debug_assert_eq!(self.value(*id).ndim(), 0);
            total += self.scalar(*id) * *c;
            ng |= self.needs(*id);
        }
        let v = ArrayD::from_elem(IxDyn(&[]), total);
        self.push(v, Op::WeightedSum(terms.to_vec()), ng)
    }

    /// 2-d convolution over `(C, H, W)` with square kernel, symmetric
    /// padding and the given stride.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> VarId {
        let _t = optime::start("conv2d fwd");
        let xv = as3(self.value(x));
        let wv = as4(self.value(w));
        let bv = self.value(b);
        let (cout, cin, kh, kw) = wv.dim();
        assert_eq!(xv.dim().0, cin, "conv2d: input channel mismatch");
        assert_eq!(bv.shape(), [cout], "conv2d: bias shape");

        let padded = {
            let _t = optime::start("conv2d fwd pad");
            extend_to_kernel(pad2d(&xv, pad, mode), kh, kw)
        };
        let (col, oh, ow) = {
            let _t = optime::start("conv2d fwd im2col");
            im2col(&padded, kh, kw, stride)
        };
        let p = oh * ow;
        let mut y = Array2::<F>::zeros((cout, p));
        {
            let _t = optime::start("conv2d fwd mm");
            let ys = y.as_slice_mut().expect("conv2d: output contiguous");
            let ws = self
                .value(w)
                .as_slice()
                .expect("conv2d: weight contiguous");
            let cs = col.as_slice().expect("conv2d: col contiguous");
            gemm::gemm_rm(cout, cin * kh * kw, p, ws, cs, ys);
            for ci in 0..cout {
                let bvv = bv[[ci]];
                for v in &mut ys[ci * p..(ci + 1) * p] {
                    *v += bvv;
                }
            }
        }
        let out = y
            .into_shape_with_order((cout, oh, ow))
            .expect("conv2d: output reshape")
            .into_dyn();
        let save_col = if self.needs(w) { Some(col) } else { None };
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                mode,
                col: save_col,
            },
            ng,
        )
    }

    /// Transposed convolution that exactly doubles the spatial size:
    /// stride 2, kernel 3, zero padding 1, output padding 1. Weight layout
    /// is `(C_in, C_out, 3, 3)`.
    pub fn conv_transpose2d(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let _t = optime::start("tconv fwd");
        let xv = as3(self.value(x));
        let wv = as4(self.value(w));
        let bv = self.value(b);
        let (cin, cout, kh, kw) = wv.dim();
        assert_eq!(xv.dim().0, cin, "conv_transpose2d: input channel mismatch");
        assert_eq!((kh, kw), (3, 3), "conv_transpose2d: kernel is fixed at 3");
        assert_eq!(bv.shape(), [cout], "conv_transpose2d: bias shape");

        // Adjoint of a stride-2 pad-1 conv whose weights are this op's
        // weights read as (cin=Cout_conv, cout=Cin_conv): scattering x
        // through it yields the padded output, whose interior is the result.
        let (_, h, w_sp) = xv.dim();
        let (oh, ow) = (2 * h, 2 * w_sp);
        let scattered = conv_scatter(&xv, &wv, 2, oh + 2, ow + 2);
        let mut out = scattered
            .slice(ndarray::s![.., 1..=oh, 1..=ow])
            .to_owned();
        for c in 0..cout {
            let bc = bv[[c]];
            out.index_axis_mut(Axis(0), c).mapv_inplace(|t| t + bc);
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out.into_dyn(), Op::ConvTranspose2d { x, w, b }, ng)
    }

    /// Per-channel normalization to zero mean and unit variance followed by
    /// a learned affine map. No running statistics.
    pub fn instance_norm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> VarId {
        let _t = optime::start("inorm fwd");
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        assert_eq!(self.value(gamma).shape(), [c], "instance_norm: gamma shape");
        assert_eq!(self.value(beta).shape(), [c], "instance_norm: beta shape");

        let eps = lit::<F>(INSTANCE_NORM_EPS);
        let hw = h * w;
        let n = lit::<F>(hw as f64);
        let mut normalized = Array3::<F>::zeros((c, h, w));
        let mut inv_std = Array1::<F>::zeros(c);
        let mut out = Array3::<F>::zeros((c, h, w));
        let xs = xv.as_slice().expect("instance_norm: input contiguous");
        let ns = normalized
            .as_slice_mut()
            .expect("instance_norm: normalized contiguous");
        let os = out.as_slice_mut().expect("instance_norm: output contiguous");
        for ci in 0..c {
            let plane = &xs[ci * hw..(ci + 1) * hw];
            let mean = striped_sum(plane) / n;
            let var = striped_sq_dev(plane, mean) / n;
            let is = (var + eps).sqrt().recip();
            inv_std[ci] = is;
            let g = self.value(gamma)[[ci]];
            let bt = self.value(beta)[[ci]];
            let np = &mut ns[ci * hw..(ci + 1) * hw];
            let op = &mut os[ci * hw..(ci + 1) * hw];
            for ((nv, ov), xv) in np.iter_mut().zip(op.iter_mut()).zip(plane) {
                let xhat = (*xv - mean) * is;
                *nv = xhat;
                *ov = g * xhat + bt;
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out.into_dyn(),
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                normalized: normalized.into_dyn(),
                inv_std,
            },
            ng,
        )
    }

    /// Reverse pass from a scalar root. Returns gradients for every node on
    /// a path from the root to a gradient-requiring leaf.
    pub fn backward(&self, root: VarId) -> Gradients<F> {
        assert_eq!(
            self.value(root).ndim(),
            0,
            "backward: root must be a scalar node"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[]), F::one()));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(gy) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: usize, gy: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        let _t = optime::start(match &self.nodes[id].op {
            Op::Conv2d { .. } => "conv2d bwd",
            Op::ConvTranspose2d { .. } => "tconv bwd",
            Op::InstanceNorm { .. } => "inorm bwd",
            _ => "eltwise bwd",
        });
        let mut accum = |tid: VarId, delta: ArrayD<F>| {
            if !self.needs(tid) {
                return;
            }
            match &mut grads[tid.0] {
                Some(g) => *g += &delta,
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum(*a, gy.clone());
                accum(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                accum(*a, gy.clone());
                accum(*b, gy.mapv(|t| -t));
            }
            Op::Scale(x, c) => accum(*x, gy.mapv(|t| t * *c)),
            Op::AddScalar(x, _) => accum(*x, gy.clone()),
            Op::Square(x) => {
                let two = lit::<F>(2.0);
                accum(*x, gy * &self.value(*x).mapv(|t| two * t));
            }
            Op::Abs(x) => {
                let sign = self.value(*x).mapv(|t| {
                    if t > F::zero() {
                        F::one()
                    } else if t < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    }
                });
                accum(*x, gy * &sign);
            }
            Op::Relu(x) => {
                let mask = self
                    .value(*x)
                    .mapv(|t| if t > F::zero() { F::one() } else { F::zero() });
                accum(*x, gy * &mask);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let mask = self
                    .value(*x)
                    .mapv(|t| if t > F::zero() { F::one() } else { s });
                accum(*x, gy * &mask);
            }
            Op::Tanh(x) => {
                // value of this node is tanh(x)
                let d = self.nodes[id].value.mapv(|t| F::one() - t * t);
                accum(*x, gy * &d);
            }
            Op::Sigmoid(x) => {
                let d = self.nodes[id].value.mapv(|s| s * (F::one() - s));
                accum(*x, gy * &d);
            }
            Op::Softplus(x) => {
                let d = self.value(*x).mapv(sigmoid_stable);
                accum(*x, gy * &d);
            }
            Op::Mean(x) => {
                let shape = self.value(*x).raw_dim();
                let n = lit::<F>(self.value(*x).len() as f64);
                let g = gy.iter().next().copied().unwrap_or(F::zero()) / n;
                accum(*x, ArrayD::from_elem(shape, g));
            }
            Op::ChannelMean(x) => {
                let xv = as3(self.value(*x));
                let (c, h, w) = xv.dim();
                let n = lit::<F>((h * w) as f64);
                let mut dx = Array3::<F>::zeros((c, h, w));
                for ci in 0..c {
                    let g = gy[[ci]] / n;
                    dx.index_axis_mut(Axis(0), ci).fill(g);
                }
                accum(*x, dx.into_dyn());
            }
            Op::Affine { x, w, b } => {
                let g = gy.iter().next().copied().unwrap_or(F::zero());
                accum(*x, self.value(*w).mapv(|t| t * g));
                accum(*w, self.value(*x).mapv(|t| t * g));
                accum(*b, ArrayD::from_elem(IxDyn(&[]), g));
            }
            Op::WeightedSum(terms) => {
                let g = gy.iter().next().copied().unwrap_or(F::zero());
                for (tid, c) in terms {
                    accum(*tid, ArrayD::from_elem(IxDyn(&[]), g * *c));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                mode,
                col,
            } => {
                let xv = as3(self.value(*x));
                let wv = as4(self.value(*w));
                let (cout, cin, kh, kw) = wv.dim();
                let gyv = as3(gy);
                let (_, oh, ow) = gyv.dim();
                let p = oh * ow;
                let rl = cin * kh * kw;
                let gstd = gy.as_standard_layout();
                let gys = gstd.as_slice().expect("conv2d backward: dy contiguous");

                if self.needs(*b) {
                    let dy_flat = gyv
                        .to_shape((cout, p))
                        .expect("conv2d backward: dy reshape");
                    let db = dy_flat.sum_axis(Axis(1));
                    accum(*b, db.into_dyn());
                }
                if self.needs(*w) {
                    let _t = optime::start("conv2d bwd dw");
                    let cs = col
                        .as_ref()
                        .expect("conv2d backward: col cached when the weight needs a gradient")
                        .as_slice()
                        .expect("conv2d backward: col contiguous");
                    let mut colt = vec![F::zero(); rl * p];
                    gemm::transpose_rm(rl, p, cs, &mut colt);
                    let mut dw = Array2::<F>::zeros((cout, rl));
                    {
                        let _t = optime::start("conv2d bwd dw mm");
                        let dws = dw.as_slice_mut().expect("conv2d backward: dw contiguous");
                        gemm::gemm_rm(cout, p, rl, gys, &colt, dws);
                    }
                    accum(
                        *w,
                        dw.into_shape_with_order((cout, cin, kh, kw))
                            .expect("conv2d backward: dw reshape")
                            .into_dyn(),
                    );
                }
                if self.needs(*x) {
                    let _t = optime::start("conv2d bwd dx");
                    let (_, h, w_sp) = xv.dim();
                    let (hp, wp) = (h + 2 * pad, w_sp + 2 * pad);
                    let dext = conv_scatter(&gyv.view(), &wv, *stride, hp.max(kh), wp.max(kw));
                    // drop gradient falling on the degenerate-size zero extension
                    let dpadded = dext.slice(ndarray::s![.., ..hp, ..wp]).to_owned();
                    accum(*x, unpad2d(&dpadded, *pad, *mode, h, w_sp).into_dyn());
                }
            }
            Op::ConvTranspose2d { x, w, b } => {
                let xv = as3(self.value(*x));
                let wv = as4(self.value(*w));
                let (cin, cout, kh, kw) = wv.dim();
                let gyv = as3(gy);

                if self.needs(*b) {
                    let mut db = Array1::<F>::zeros(cout);
                    for c in 0..cout {
                        db[c] = gyv.index_axis(Axis(0), c).iter().copied().sum();
                    }
                    accum(*b, db.into_dyn());
                }
                // dX and dW are the forward and weight passes of the adjoint
                // stride-2 conv applied to the incoming gradient.
                if self.needs(*x) || self.needs(*w) {
                    let gpad = pad2d(&gyv, 1, PadMode::Zero);
                    let (col, goh, gow) = im2col(&gpad, kh, kw, 2);
                    let rl = cout * kh * kw;
                    let p = goh * gow;
                    let cs = col.as_slice().expect("convT backward: col contiguous");
                    if self.needs(*x) {
                        let ws = self
                            .value(*w)
                            .as_slice()
                            .expect("convT backward: weight contiguous");
                        let mut dx = Array2::<F>::zeros((cin, p));
                        gemm::gemm_rm(
                            cin,
                            rl,
                            p,
                            ws,
                            cs,
                            dx.as_slice_mut().expect("convT backward: dx contiguous"),
                        );
                        accum(
                            *x,
                            dx.into_shape_with_order((cin, goh, gow))
                                .expect("convT backward: dx reshape")
                                .into_dyn(),
                        );
                    }
                    if self.needs(*w) {
                        let (_, h, w_sp) = xv.dim();
                        assert_eq!((goh, gow), (h, w_sp), "convT backward: adjoint shape");
                        let xs = self
                            .value(*x)
                            .as_slice()
                            .expect("convT backward: x contiguous");
                        let mut colt = vec![F::zero(); rl * p];
                        gemm::transpose_rm(rl, p, cs, &mut colt);
                        let mut dw = Array2::<F>::zeros((cin, rl));
                        gemm::gemm_rm(
                            cin,
                            p,
                            rl,
                            xs,
                            &colt,
                            dw.as_slice_mut().expect("convT backward: dw contiguous"),
                        );
                        accum(
                            *w,
                            dw.into_shape_with_order((cin, cout, kh, kw))
                                .expect("convT backward: dw reshape")
                                .into_dyn(),
                        );
                    }
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (c, h, w) = as3(gy).dim();
                let hw = h * w;
                let n = lit::<F>(hw as f64);
                let g_std = gy.as_standard_layout();
                let gs = g_std
                    .as_slice()
                    .expect("instance_norm backward: dy contiguous");
                let xh = normalized
                    .as_slice()
                    .expect("instance_norm backward: xhat contiguous");

                // Per-channel Σdy and Σdy·x̂ feed all three gradients.
                let mut sdy = Array1::<F>::zeros(c);
                let mut sdyxh = Array1::<F>::zeros(c);
                for ci in 0..c {
                    let span = ci * hw..(ci + 1) * hw;
                    sdy[ci] = striped_sum(&gs[span.clone()]);
                    sdyxh[ci] = striped_dot(&gs[span.clone()], &xh[span]);
                }

                if self.needs(*beta) {
                    accum(*beta, sdy.clone().into_dyn());
                }
                if self.needs(*gamma) {
                    accum(*gamma, sdyxh.clone().into_dyn());
                }
                if self.needs(*x) {
                    let gv = self.value(*gamma);
                    let mut dx = Array3::<F>::zeros((c, h, w));
                    let ds = dx
                        .as_slice_mut()
                        .expect("instance_norm backward: dx contiguous");
                    for ci in 0..c {
                        let g = gv[[ci]];
                        let sum_dxhat = g * sdy[ci];
                        let sum_dxhat_xhat = g * sdyxh[ci];
                        let is_n = inv_std[ci] / n;
                        let span = ci * hw..(ci + 1) * hw;
                        let dplane = &mut ds[span.clone()];
                        for ((d, gyv), xhv) in
                            dplane.iter_mut().zip(&gs[span.clone()]).zip(&xh[span])
                        {
                            let dxhat = *gyv * g;
                            *d = is_n * (n * dxhat - sum_dxhat - *xhv * sum_dxhat_xhat);
                        }
                    }
                    accum(*x, dx.into_dyn());
                }
            }
        }
    }
}

/// Slice sum with striped accumulators; a single running total would form a
/// serial dependency chain the compiler cannot vectorize (float addition is
/// not associative).
fn striped_sum<F: Scalar>(s: &[F]) -> F {
    const LANES: usize = 32;
    let mut acc = [F::zero(); LANES];
    let mut it = s.chunks_exact(LANES);
    for ch in it.by_ref() {
        for j in 0..LANES {
            acc[j] += ch[j];
        }
    }
    let mut tail = F::zero();
    for &v in it.remainder() {
        tail += v;
    }
    let mut width = LANES / 2;
    while width > 0 {
        for j in 0..width {
            let hi = acc[j + width];
            acc[j] += hi;
        }
        width /= 2;
    }
    acc[0] + tail
}

/// Striped Σ aᵢ·bᵢ over equal-length slices.
fn striped_dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    const LANES: usize = 32;
    assert_eq!(a.len(), b.len(), "striped_dot: length mismatch");
    let mut acc = [F::zero(); LANES];
    let mut ia = a.chunks_exact(LANES);
    let mut ib = b.chunks_exact(LANES);
    for (ca, cb) in ia.by_ref().zip(ib.by_ref()) {
        for j in 0..LANES {
            acc[j] = ca[j].mul_add(cb[j], acc[j]);
        }
    }
    let mut tail = F::zero();
    for (&va, &vb) in ia.remainder().iter().zip(ib.remainder()) {
        tail = va.mul_add(vb, tail);
    }
    let mut width = LANES / 2;
    while width > 0 {
        for j in 0..width {
            let hi = acc[j + width];
            acc[j] += hi;
        }
        width /= 2;
    }
    acc[0] + tail
}

/// Striped Σ (sᵢ − mean)².
fn striped_sq_dev<F: Scalar>(s: &[F], mean: F) -> F {
    const LANES: usize = 32;
    let mut acc = [F::zero(); LANES];
    let mut it = s.chunks_exact(LANES);
    for ch in it.by_ref() {
        for j in 0..LANES {
            let d = ch[j] - mean;
            acc[j] = d.mul_add(d, acc[j]);
        }
    }
    let mut tail = F::zero();
    for &v in it.remainder() {
        let d = v - mean;
        tail = d.mul_add(d, tail);
    }
    let mut width = LANES / 2;
    while width > 0 {
        for j in 0..width {
            let hi = acc[j + width];
            acc[j] += hi;
        }
        width /= 2;
    }
    acc[0] + tail
}

fn sigmoid_stable<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        (F::one() + (-z).exp()).recip()
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

fn softplus_stable<F: Scalar>(z: F) -> F {
    if z > F::zero() {
        z + (F::one() + (-z).exp()).ln()
    } else {
        (F::one() + z.exp()).ln()
    }
}

fn as3<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView3<'_, F> {
    a.view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("expected a rank-3 tensor")
}

fn as4<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView4<'_, F> {
    a.view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("expected a rank-4 tensor")
}

fn reflect_index(i: i64, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let last = (len - 1) as i64;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i > last {
        i = 2 * last - i;
    }
    i.clamp(0, last) as usize
}

fn pad2d<F: Scalar>(x: &ndarray::ArrayView3<'_, F>, pad: usize, mode: PadMode) -> Array3<F> {
    if pad == 0 {
        return x.to_owned();
    }
    let (c, h, w) = x.dim();
    let mut out = Array3::<F>::zeros((c, h + 2 * pad, w + 2 * pad));
    match mode {
        PadMode::Zero => {
            out.slice_mut(ndarray::s![.., pad..pad + h, pad..pad + w])
                .assign(x);
        }
        PadMode::Reflect => {
            let p = pad as i64;
            let wo = w + 2 * pad;
            let x_std = x.as_standard_layout();
            let src = x_std.as_slice().expect("pad2d: input contiguous");
            let dst = out.as_slice_mut().expect("pad2d: output contiguous");
            for ci in 0..c {
                for y in 0..h + 2 * pad {
                    let sy = reflect_index(y as i64 - p, h);
                    let srow = &src[(ci * h + sy) * w..(ci * h + sy + 1) * w];
                    let drow = &mut dst[(ci * (h + 2 * pad) + y) * wo..][..wo];
                    drow[pad..pad + w].copy_from_slice(srow);
                    for xx in 0..pad {
                        drow[xx] = srow[reflect_index(xx as i64 - p, w)];
                        drow[pad + w + xx] = srow[reflect_index((w + xx) as i64, w)];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of `pad2d`: folds a padded-shape gradient back onto the source.
fn unpad2d<F: Scalar>(
    dpadded: &Array3<F>,
    pad: usize,
    mode: PadMode,
    h: usize,
    w: usize,
) -> Array3<F> {
    if pad == 0 {
        return dpadded.clone();
    }
    let (c, _, _) = dpadded.dim();
    match mode {
        PadMode::Zero => dpadded
            .slice(ndarray::s![.., pad..pad + h, pad..pad + w])
            .to_owned(),
        PadMode::Reflect => {
            let p = pad as i64;
            let wo = w + 2 * pad;
            let mut out = Array3::<F>::zeros((c, h, w));
            let dst = out.as_slice_mut().expect("unpad2d: output contiguous");
            let src = dpadded.as_slice().expect("unpad2d: input contiguous");
            for ci in 0..c {
                for y in 0..h + 2 * pad {
                    let sy = reflect_index(y as i64 - p, h);
                    let srow = &src[(ci * (h + 2 * pad) + y) * wo..][..wo];
                    let drow = &mut dst[(ci * h + sy) * w..][..w];
                    for (d, s) in drow.iter_mut().zip(&srow[pad..pad + w]) {
                        *d += *s;
                    }
                    for xx in 0..pad {
                        drow[reflect_index(xx as i64 - p, w)] += srow[xx];
                        drow[reflect_index((w + xx) as i64, w)] += srow[pad + w + xx];
                    }
                }
            }
            out
        }
    }
}

/// Degenerate-size guard: if the padded input is smaller than the kernel
/// (possible only on tiny verification inputs, e.g. a 1×1 map reaching a
/// 4×4 kernel), append zero rows/columns at the bottom/right so exactly one
/// kernel application fits. A no-op for every regular size.
fn extend_to_kernel<F: Scalar>(padded: Array3<F>, kh: usize, kw: usize) -> Array3<F> {
    let (c, hp, wp) = padded.dim();
    if hp >= kh && wp >= kw {
        return padded;
    }
    let mut out = Array3::<F>::zeros((c, hp.max(kh), wp.max(kw)));
    out.slice_mut(ndarray::s![.., ..hp, ..wp]).assign(&padded);
    out
}

/// im2col on an already padded input: returns `(C*kh*kw, oh*ow)`.
fn im2col<F: Scalar>(
    padded: &Array3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
) -> (Array2<F>, usize, usize) {
    let (c, hp, wp) = padded.dim();
    let oh = (hp - kh) / stride + 1;
    let ow = (wp - kw) / stride + 1;
    let mut col = Array2::<F>::zeros((c * kh * kw, oh * ow));
    let src = padded.as_slice().expect("im2col: padded input contiguous");
    let dst = col.as_slice_mut().expect("im2col: col contiguous");
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row_base = ((ci * kh + i) * kw + j) * (oh * ow);
                for oy in 0..oh {
                    let s0 = ci * hp * wp + (oy * stride + i) * wp + j;
                    let d0 = row_base + oy * ow;
                    if stride == 1 {
                        dst[d0..d0 + ow].copy_from_slice(&src[s0..s0 + ow]);
                    } else {
                        for ox in 0..ow {
                            dst[d0 + ox] = src[s0 + ox * stride];
                        }
                    }
                }
            }
        }
    }
    (col, oh, ow)
}

/// Scatters `dy` back through conv weights (the col2im of `w^T dy`),
/// producing a padded-input-shaped array. Shared by the conv input-gradient
/// and the transposed-conv forward.
fn conv_scatter<F: Scalar>(
    dy: &ndarray::ArrayView3<'_, F>,
    w: &ndarray::ArrayView4<'_, F>,
    stride: usize,
    hp: usize,
    wp: usize,
) -> Array3<F> {
    let (cout, cin, kh, kw) = w.dim();
    let (dyc, oh, ow) = dy.dim();
    assert_eq!(dyc, cout, "conv_scatter: channel mismatch");
    let p = oh * ow;
    let rl = cin * kh * kw;

    // Work in the transposed layout (positions × kernel taps): the product
    // dyᵀ·w_flat needs no transpose of the large weight matrix, and the
    // scatter then reads each position's taps contiguously.
    let dy_std = dy.as_standard_layout();
    let dys = dy_std.as_slice().expect("conv_scatter: dy contiguous");
    let mut dyt = vec![F::zero(); p * cout];
    gemm::transpose_rm(cout, p, dys, &mut dyt);
    let w_std = w.as_standard_layout();
    let ws = w_std.as_slice().expect("conv_scatter: weight contiguous");
    let mut colt = vec![F::zero(); p * rl];
    gemm::gemm_rm(p, cout, rl, &dyt, ws, &mut colt);

    let mut out = Array3::<F>::zeros((cin, hp, wp));
    let dst = out.as_slice_mut().expect("conv_scatter: output contiguous");
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &colt[(oy * ow + ox) * rl..(oy * ow + ox + 1) * rl];
            let mut r = 0;
            for ci in 0..cin {
                for i in 0..kh {
                    let d0 = ci * hp * wp + (oy * stride + i) * wp + ox * stride;
                    for (dv, rv) in dst[d0..d0 + kw].iter_mut().zip(&row[r..r + kw]) {
                        *dv += *rv;
                    }
                    r += kw;
                }
            }
        }
    }
    out
}

pub mod gradcheck {
    //! Central-finite-difference verification of autodiff gradients.
    //!
    //! The harness is deliberately independent of the backward pass: it only
    //! ever calls the forward path of a model under small perturbations.

    /// Outcome of one finite-difference sweep.
    #[derive(Debug, Clone, Copy)]
    pub struct GradCheckReport {
        pub checked: usize,
        pub failed: usize,
        pub max_rel_err: f64,
    }

    impl GradCheckReport {
        pub fn pass_fraction(&self) -> f64 {
            if self.checked == 0 {
                1.0
            } else {
                (self.checked - self.failed) as f64 / self.checked as f64
            }
        }
    }

    /// Compares analytic gradients against central differences on sampled
    /// coordinates of a cloneable model.
    ///
    /// `eval` runs the scalar forward objective; `nudge` adds `delta` to one
    /// coordinate of one tensor; `analytic` is indexed the same way. All
    /// tensors are addressed by `(tensor index, flat coordinate)`.
    pub fn check_model<M: Clone>(
        model: &M,
        tensor_sizes: &[usize],
        coords_per_tensor: usize,
        step: f64,
        rel_tol: f64,
        eval: impl Fn(&M) -> f64,
        nudge: impl Fn(&mut M, usize, usize, f64),
        analytic: impl Fn(usize, usize) -> f64,
        rng: &mut impl rand::Rng,
    ) -> GradCheckReport {
        let mut checked = 0;
        let mut failed = 0;
        let mut max_rel = 0.0f64;
        for (t, &len) in tensor_sizes.iter().enumerate() {
            if len == 0 {
                continue;
            }
            for _ in 0..coords_per_tensor.min(len) {
                let c = rng.random_range(0..len);
                let mut plus = model.clone();
                nudge(&mut plus, t, c, step);
                let mut minus = model.clone();
                nudge(&mut minus, t, c, -step);
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let an = analytic(t, c);
                let denom = an.abs().max(fd.abs()).max(1e-6);
                let rel = (an - fd).abs() / denom;
                max_rel = max_rel.max(rel);
                checked += 1;
                if rel > rel_tol {
                    failed += 1;
                }
            }
        }
        GradCheckReport {
            checked,
            failed,
            max_rel_err: max_rel,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check_model;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// FD-checks `build` as a function of its tensor inputs.
    fn fd_check(
        shapes: &[&[usize]],
        build: impl Fn(&mut Graph<f64>, &[VarId]) -> VarId + Copy,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<ArrayD<f64>> = shapes.iter().map(|s| rand_arr(s, &mut rng)).collect();
        let sizes: Vec<usize> = inputs.iter().map(|a| a.len()).collect();

        // analytic gradients
        let mut g = Graph::<f64>::new();
        let ids: Vec<VarId> = inputs
            .iter()
            .map(|a| g.leaf(Arc::new(a.clone()), true))
            .collect();
        let root = build(&mut g, &ids);
        let grads = g.backward(root);
        let analytic: Vec<ArrayD<f64>> = ids.iter().map(|id| grads.expect(*id).clone()).collect();

        let eval = |m: &Vec<ArrayD<f64>>| {
            let mut g = Graph::<f64>::new();
            let ids: Vec<VarId> = m.iter().map(|a| g.leaf(Arc::new(a.clone()), false)).collect();
            let root = build(&mut g, &ids);
            g.scalar(root)
        };
        let report = check_model(
            &inputs,
            &sizes,
            12,
            1e-5,
            1e-5,
            eval,
            |m, t, c, d| {
                m[t].as_slice_mut().unwrap()[c] += d;
            },
            |t, c| analytic[t].as_slice().unwrap()[c],
            &mut rng,
        );
        assert_eq!(
            report.failed, 0,
            "finite differences disagree: max rel err {:.3e}",
            report.max_rel_err
        );
    }

    #[test]
    fn grad_elementwise_chain() {
        fd_check(&[&[3, 4, 4], &[3, 4, 4]], |g, ids| {
            let s = g.sub(ids[0], ids[1]);
            let a = g.abs(s);
            let t = g.tanh(a);
            g.mean(t)
        }, 1);
    }

    #[test]
    fn grad_activations() {
        fd_check(&[&[2, 5, 5]], |g, ids| {
            let r = g.relu(ids[0]);
            let l = g.leaky_relu(r, 0.2);
            let q = g.square(l);
            let sp = g.softplus(q);
            let sg = g.sigmoid(sp);
            g.mean(sg)
        }, 2);
    }

    #[test]
    fn grad_conv2d_zero_pad() {
        fd_check(&[&[2, 6, 6], &[3, 2, 3, 3], &[3]], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1, PadMode::Zero);
            let t = g.tanh(y);
            g.mean(t)
        }, 3);
    }

    #[test]
    fn grad_conv2d_reflect_stride2() {
        fd_check(&[&[2, 8, 8], &[4, 2, 3, 3], &[4]], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1, PadMode::Reflect);
            let s = g.square(y);
            g.mean(s)
        }, 4);
    }

    #[test]
    fn grad_conv2d_k4_stride2() {
        fd_check(&[&[2, 8, 8], &[3, 2, 4, 4], &[3]], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1, PadMode::Zero);
            g.mean(y)
        }, 5);
    }

    #[test]
    fn grad_conv2d_kernel_larger_than_input() {
        // 2x2 input, zero pad 1 -> padded 4x4 fits k4; 1x1 -> padded 3x3
        // needs the degenerate-size extension.
        fd_check(&[&[2, 1, 1], &[3, 2, 4, 4], &[3]], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1, PadMode::Zero);
            let t = g.tanh(y);
            g.mean(t)
        }, 15);
    }

    #[test]
    fn conv2d_degenerate_input_shape() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = g.constant(rand_arr(&[2, 1, 1], &mut rng));
        let w = g.constant(rand_arr(&[5, 2, 4, 4], &mut rng));
        let b = g.constant(rand_arr(&[5], &mut rng));
        let y = g.conv2d(x, w, b, 2, 1, PadMode::Zero);
        assert_eq!(g.value(y).shape(), &[5, 1, 1]);
    }

    #[test]
    fn grad_conv_transpose2d() {
        fd_check(&[&[3, 4, 4], &[3, 2, 3, 3], &[2]], |g, ids| {
            let y = g.conv_transpose2d(ids[0], ids[1], ids[2]);
            let t = g.tanh(y);
            g.mean(t)
        }, 6);
    }

    #[test]
    fn grad_instance_norm() {
        fd_check(&[&[3, 5, 5], &[3], &[3]], |g, ids| {
            let y = g.instance_norm(ids[0], ids[1], ids[2]);
            let t = g.tanh(y);
            g.mean(t)
        }, 7);
    }

    #[test]
    fn grad_reductions_and_affine() {
        fd_check(&[&[4, 3, 3], &[4], &[]], |g, ids| {
            let cm = g.channel_mean(ids[0]);
            g.affine(cm, ids[1], ids[2])
        }, 8);
    }

    #[test]
    fn grad_weighted_sum() {
        fd_check(&[&[2, 3, 3], &[2, 3, 3]], |g, ids| {
            let m0 = g.mean(ids[0]);
            let a = g.abs(ids[1]);
            let m1 = g.mean(a);
            g.weighted_sum(&[(m0, 1.0), (m1, 40.0)])
        }, 9);
    }

    #[test]
    fn conv_transpose_doubles_spatial_size() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = g.constant(rand_arr(&[4, 5, 7], &mut rng));
        let w = g.constant(rand_arr(&[4, 2, 3, 3], &mut rng));
        let b = g.constant(rand_arr(&[2], &mut rng));
        let y = g.conv_transpose2d(x, w, b);
        assert_eq!(g.value(y).shape(), &[2, 10, 14]);
    }

    #[test]
    fn conv2d_shapes() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = g.constant(rand_arr(&[3, 16, 16], &mut rng));
        let w = g.constant(rand_arr(&[8, 3, 3, 3], &mut rng));
        let b = g.constant(rand_arr(&[8], &mut rng));
        let y = g.conv2d(x, w, b, 2, 1, PadMode::Reflect);
        assert_eq!(g.value(y).shape(), &[8, 8, 8]);

        let w4 = g.constant(rand_arr(&[4, 8, 4, 4], &mut rng));
        let b4 = g.constant(rand_arr(&[4], &mut rng));
        let y2 = g.conv2d(y, w4, b4, 2, 1, PadMode::Zero);
        assert_eq!(g.value(y2).shape(), &[4, 4, 4]);
    }

    #[test]
    fn instance_norm_statistics_are_standardized() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = g.constant(ArrayD::from_shape_fn(IxDyn(&[4, 12, 12]), |_| {
            rng.random_range(-2.0..2.0)
        }));
        let gamma = g.constant(ArrayD::from_elem(IxDyn(&[4]), 1.0));
        let beta = g.constant(ArrayD::zeros(IxDyn(&[4])));
        let y = g.instance_norm(x, gamma, beta);
        let yv = as3(g.value(y));
        for c in 0..4 {
            let plane = yv.index_axis(Axis(0), c);
            let n = plane.len() as f64;
            let mean: f64 = plane.iter().sum::<f64>() / n;
            let var: f64 = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "channel {c} var {var}");
        }
    }

    #[test]
    fn frozen_branch_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = g.leaf(Arc::new(rand_arr(&[2, 4, 4], &mut rng)), true);
        let w = g.leaf(Arc::new(rand_arr(&[2, 2, 3, 3], &mut rng)), false);
        let b = g.leaf(Arc::new(rand_arr(&[2], &mut rng)), false);
        let y = g.conv2d(x, w, b, 1, 1, PadMode::Zero);
        let m = g.mean(y);
        let grads = g.backward(m);
        assert!(grads.get(x).is_some());
        assert!(grads.get(w).is_none());
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn reflect_index_degenerate_axis() {
        assert_eq!(reflect_index(-1, 1), 0);
        assert_eq!(reflect_index(1, 1), 0);
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(2, 4), 2);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_arr(&[3, 8, 8], &mut rng);
        let w = rand_arr(&[4, 3, 3, 3], &mut rng);
        let b = rand_arr(&[4], &mut rng);
        let run = || {
            let mut g = Graph::<f64>::new();
            let xi = g.constant(x.clone());
            let wi = g.constant(w.clone());
            let bi = g.constant(b.clone());
            let y = g.conv2d(xi, wi, bi, 2, 1, PadMode::Reflect);
            let t = g.tanh(y);
            let m = g.mean(t);
            g.scalar(m)
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
