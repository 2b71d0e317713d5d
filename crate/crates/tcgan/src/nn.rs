//! Network definitions: residual generators, patch discriminators, and the
//! model-selection classifier.
//!
//! Every network exposes its parameters in one canonical order via
//! [`Network::params`]; the same order is produced by the graph-building
//! forward passes, consumed by the optimizer, and written to checkpoints.
//! Parameters live behind `Arc` so a forward pass can insert them into a
//! [`Graph`] without copying; updates use copy-on-write.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{lit, Graph, PadMode, Scalar, VarId};
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, ResidualTensor};

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;
/// Negative slope of the discriminator activations.
pub const LEAKY_SLOPE: f64 = 0.2;

const GEN_WIDTHS: [usize; 3] = [64, 128, 256];
const DISC_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const RES_BLOCKS: usize = 9;

/// Shared parameter tensor; `Arc` keeps graph insertion copy-free.
pub type Param<F> = Arc<ArrayD<F>>;

/// Access to a network's parameters in canonical order.
pub trait Network<F: Scalar> {
    fn params(&self) -> Vec<&Param<F>>;
    fn params_mut(&mut self) -> Vec<&mut Param<F>>;

    /// Total number of scalar parameters.
    fn scalar_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Result of building a forward pass: the output node plus the parameter
/// leaf ids, aligned with [`Network::params`] order.
pub struct NetGraph {
    pub out: VarId,
    pub param_ids: Vec<VarId>,
}

#[derive(Debug, Clone)]
struct Conv<F: Scalar> {
    w: Param<F>,
    b: Param<F>,
}

#[derive(Debug, Clone)]
struct Norm<F: Scalar> {
    gamma: Param<F>,
    beta: Param<F>,
}

/// Deterministic parameter factory over one seeded stream.
struct ParamInit<F: Scalar> {
    rng: ChaCha8Rng,
    dist: Normal<f64>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> ParamInit<F> {
    fn new(seed: u64, std: f64) -> Self {
        ParamInit {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dist: Normal::new(0.0, std).expect("valid normal"),
            _marker: std::marker::PhantomData,
        }
    }

    /// i.i.d. N(0, std²), drawn at 64-bit and narrowed to `F`.
    fn normal(&mut self, shape: &[usize]) -> Param<F> {
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| lit::<F>(self.dist.sample(&mut self.rng)))
            .collect();
        Arc::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches count"))
    }

    fn zeros(&mut self, shape: &[usize]) -> Param<F> {
        Arc::new(ArrayD::zeros(IxDyn(shape)))
    }

    fn ones(&mut self, shape: &[usize]) -> Param<F> {
        Arc::new(ArrayD::from_elem(IxDyn(shape), F::one()))
    }

    fn conv(&mut self, cout: usize, cin: usize, k: usize) -> Conv<F> {
        Conv {
            w: self.normal(&[cout, cin, k, k]),
            b: self.zeros(&[cout]),
        }
    }

    /// Transposed-conv weights in `(C_in, C_out, 3, 3)` layout.
    fn tconv(&mut self, cin: usize, cout: usize) -> Conv<F> {
        Conv {
            w: self.normal(&[cin, cout, 3, 3]),
            b: self.zeros(&[cout]),
        }
    }

    fn norm(&mut self, c: usize) -> Norm<F> {
        Norm {
            gamma: self.ones(&[c]),
            beta: self.zeros(&[c]),
        }
    }
}

fn push_conv<F: Scalar>(g: &mut Graph<F>, c: &Conv<F>, train: bool, ids: &mut Vec<VarId>) -> (VarId, VarId) {
    let w = g.leaf(c.w.clone(), train);
    let b = g.leaf(c.b.clone(), train);
    ids.push(w);
    ids.push(b);
    (w, b)
}

fn push_norm<F: Scalar>(g: &mut Graph<F>, n: &Norm<F>, train: bool, ids: &mut Vec<VarId>) -> (VarId, VarId) {
    let gamma = g.leaf(n.gamma.clone(), train);
    let beta = g.leaf(n.beta.clone(), train);
    ids.push(gamma);
    ids.push(beta);
    (gamma, beta)
}

#[derive(Debug, Clone)]
struct ResBlock<F: Scalar> {
    conv1: Conv<F>,
    norm1: Norm<F>,
    conv2: Conv<F>,
    norm2: Norm<F>,
}

/// Shadow-transform encoder: three stride-2 downsampling stages
/// (3→64→128→256), then nine residual blocks at 256 channels. All
/// convolutions use reflection padding.
#[derive(Debug, Clone)]
pub struct Encoder<F: Scalar> {
    downs: Vec<(Conv<F>, Norm<F>)>,
    blocks: Vec<ResBlock<F>>,
}

impl<F: Scalar> Encoder<F> {
    fn init(init: &mut ParamInit<F>) -> Self {
        let mut downs = Vec::with_capacity(3);
        let mut cin = 3;
        for &cout in &GEN_WIDTHS {
            downs.push((init.conv(cout, cin, 3), init.norm(cout)));
            cin = cout;
        }
        let c = *GEN_WIDTHS.last().expect("non-empty widths");
        let blocks = (0..RES_BLOCKS)
            .map(|_| ResBlock {
                conv1: init.conv(c, c, 3),
                norm1: init.norm(c),
                conv2: init.conv(c, c, 3),
                norm2: init.norm(c),
            })
            .collect();
        Encoder { downs, blocks }
    }

    /// Builds the encoder forward pass: `(3, H, W)` to `(256, H/8, W/8)`.
    pub fn forward(&self, g: &mut Graph<F>, x: VarId, train: bool) -> NetGraph {
        let mut ids = Vec::new();
        let mut h = x;
        for (conv, norm) in &self.downs {
            let (w, b) = push_conv(g, conv, train, &mut ids);
            let (gamma, beta) = push_norm(g, norm, train, &mut ids);
            h = g.conv2d(h, w, b, 2, 1, PadMode::Reflect);
            h = g.instance_norm(h, gamma, beta);
            h = g.relu(h);
        }
        for block in &self.blocks {
            let skip = h;
            let (w1, b1) = push_conv(g, &block.conv1, train, &mut ids);
            let (g1, be1) = push_norm(g, &block.norm1, train, &mut ids);
            let (w2, b2) = push_conv(g, &block.conv2, train, &mut ids);
            let (g2, be2) = push_norm(g, &block.norm2, train, &mut ids);
            h = g.conv2d(h, w1, b1, 1, 1, PadMode::Reflect);
            h = g.instance_norm(h, g1, be1);
            h = g.relu(h);
            h = g.conv2d(h, w2, b2, 1, 1, PadMode::Reflect);
            h = g.instance_norm(h, g2, be2);
            h = g.add(h, skip);
        }
        NetGraph { out: h, param_ids: ids }
    }
}

impl<F: Scalar> Network<F> for Encoder<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut ps = Vec::new();
        for (conv, norm) in &self.downs {
            ps.extend([&conv.w, &conv.b, &norm.gamma, &norm.beta]);
        }
        for b in &self.blocks {
            ps.extend([
                &b.conv1.w, &b.conv1.b, &b.norm1.gamma, &b.norm1.beta,
                &b.conv2.w, &b.conv2.b, &b.norm2.gamma, &b.norm2.beta,
            ]);
        }
        ps
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut ps = Vec::new();
        for (conv, norm) in &mut self.downs {
            ps.extend([&mut conv.w, &mut conv.b, &mut norm.gamma, &mut norm.beta]);
        }
        for b in &mut self.blocks {
            ps.extend([
                &mut b.conv1.w, &mut b.conv1.b, &mut b.norm1.gamma, &mut b.norm1.beta,
                &mut b.conv2.w, &mut b.conv2.b, &mut b.norm2.gamma, &mut b.norm2.beta,
            ]);
        }
        ps
    }
}

/// Shadow-residual decoder: three stride-2 transposed-convolution stages
/// (256→128→64→3); instance norm + ReLU after the first two, then a
/// saturating activation scaled by 2 producing a residual in `[-2, 2]`.
#[derive(Debug, Clone)]
pub struct Decoder<F: Scalar> {
    ups: Vec<(Conv<F>, Option<Norm<F>>)>,
}

impl<F: Scalar> Decoder<F> {
    fn init(init: &mut ParamInit<F>) -> Self {
        let chain = [256, 128, 64, 3];
        let mut ups = Vec::with_capacity(3);
        for i in 0..3 {
            let conv = init.tconv(chain[i], chain[i + 1]);
            let norm = (i < 2).then(|| init.norm(chain[i + 1]));
            ups.push((conv, norm));
        }
        Decoder { ups }
    }

    /// `(256, H/8, W/8)` to a residual `(3, H, W)` in `[-2, 2]`.
    pub fn forward(&self, g: &mut Graph<F>, features: VarId, train: bool) -> NetGraph {
        let mut ids = Vec::new();
        let mut h = features;
        for (conv, norm) in &self.ups {
            let (w, b) = push_conv(g, conv, train, &mut ids);
            h = g.conv_transpose2d(h, w, b);
            if let Some(n) = norm {
                let (gamma, beta) = push_norm(g, n, train, &mut ids);
                h = g.instance_norm(h, gamma, beta);
                h = g.relu(h);
            }
        }
        let t = g.tanh(h);
        let out = g.scale(t, lit::<F>(2.0));
        NetGraph { out, param_ids: ids }
    }
}

impl<F: Scalar> Network<F> for Decoder<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut ps = Vec::new();
        for (conv, norm) in &self.ups {
            ps.extend([&conv.w, &conv.b]);
            if let Some(n) = norm {
                ps.extend([&n.gamma, &n.beta]);
            }
        }
        ps
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut ps = Vec::new();
        for (conv, norm) in &mut self.ups {
            ps.extend([&mut conv.w, &mut conv.b]);
            if let Some(n) = norm {
                ps.extend([&mut n.gamma, &mut n.beta]);
            }
        }
        ps
    }
}

/// One residual generator: encoder + decoder. Maps an image to the residual
/// that, added to the input, yields the restored image.
#[derive(Debug, Clone)]
pub struct Generator<F: Scalar> {
    pub encoder: Encoder<F>,
    pub decoder: Decoder<F>,
}

impl<F: Scalar> Generator<F> {
    pub fn init(seed: u64) -> Self {
        Self::init_with_std(seed, INIT_STD)
    }

    pub fn init_with_std(seed: u64, std: f64) -> Self {
        let mut init = ParamInit::new(seed, std);
        let encoder = Encoder::init(&mut init);
        let decoder = Decoder::init(&mut init);
        Generator { encoder, decoder }
    }

    /// Full generator forward on an already-inserted image node; the output
    /// is the residual. Panics if the node is not `(3, H, W)` with spatial
    /// dims divisible by 8 (validated entry points guard this).
    pub fn residual_graph(&self, g: &mut Graph<F>, x: VarId, train: bool) -> NetGraph {
        let shape = g.value(x).shape().to_vec();
        assert_eq!(shape.len(), 3, "generator input must be (3, H, W)");
        assert_eq!(shape[0], 3, "generator input must have 3 channels");
        assert!(
            shape[1] % 8 == 0 && shape[2] % 8 == 0 && shape[1] > 0 && shape[2] > 0,
            "generator input spatial dims must be positive multiples of 8, got {}x{}",
            shape[1],
            shape[2]
        );
        let enc = self.encoder.forward(g, x, train);
        let dec = self.decoder.forward(g, enc.out, train);
        let mut param_ids = enc.param_ids;
        param_ids.extend(dec.param_ids);
        NetGraph {
            out: dec.out,
            param_ids,
        }
    }

    fn check_spatial(h: usize, w: usize) -> Result<()> {
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::InvalidInput {
                context: "generator input".into(),
                reason: format!("spatial dims must be divisible by 8, got {h}x{w}"),
            });
        }
        Ok(())
    }
}

impl Generator<f32> {
    /// Predicts the residual for one image.
    pub fn residual(&self, x: &ImageTensor) -> Result<ResidualTensor> {
        Self::check_spatial(x.height(), x.width())?;
        let mut g = Graph::<f32>::new();
        let xid = g.leaf(Arc::new(x.data().clone().into_dyn()), false);
        let net = self.residual_graph(&mut g, xid, false);
        let r = g
            .value(net.out)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("residual is rank 3");
        ResidualTensor::from_array(r)
    }

    /// Encoder feature maps `(256, H/8, W/8)` for one image.
    pub fn ste_features(&self, x: &ImageTensor) -> Result<ndarray::Array3<f32>> {
        Self::check_spatial(x.height(), x.width())?;
        let mut g = Graph::<f32>::new();
        let xid = g.leaf(Arc::new(x.data().clone().into_dyn()), false);
        let net = self.encoder.forward(&mut g, xid, false);
        Ok(g.value(net.out)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("features are rank 3"))
    }
}

impl<F: Scalar> Network<F> for Generator<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut ps = self.encoder.params();
        ps.extend(self.decoder.params());
        ps
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        // split borrow: encoder and decoder are disjoint fields
        let Generator { encoder, decoder } = self;
        let mut ps = encoder.params_mut();
        ps.extend(decoder.params_mut());
        ps
    }
}

/// The two independently initialized generators, coupled only through the
/// target-consistency loss during training.
#[derive(Debug, Clone)]
pub struct GeneratorPair<F: Scalar> {
    pub g1: Generator<F>,
    pub g2: Generator<F>,
    pub seed1: u64,
    pub seed2: u64,
}

impl<F: Scalar> GeneratorPair<F> {
    /// Requires distinct seeds and verifies that at least one parameter
    /// tensor actually differs between the two generators.
    pub fn init(seed1: u64, seed2: u64) -> Result<Self> {
        Self::init_with_std(seed1, seed2, INIT_STD)
    }

    pub fn init_with_std(seed1: u64, seed2: u64, std: f64) -> Result<Self> {
        if seed1 == seed2 {
            return Err(Error::InvalidInput {
                context: "generator pair".into(),
                reason: format!("seeds must differ, both are {seed1}"),
            });
        }
        let g1 = Generator::init_with_std(seed1, std);
        let g2 = Generator::init_with_std(seed2, std);
        let distinct = g1
            .params()
            .iter()
            .zip(g2.params().iter())
            .any(|(a, b)| a.iter().zip(b.iter()).any(|(x, y)| x != y));
        if !distinct {
            return Err(Error::InvalidInput {
                context: "generator pair".into(),
                reason: "distinct seeds produced identical parameters".into(),
            });
        }
        Ok(GeneratorPair { g1, g2, seed1, seed2 })
    }
}

/// Patch discriminator: four stride-2 4×4 convolutions (3→64→128→256→512,
/// zero padding, instance norm on stages 2–4, leaky-ReLU 0.2), then a
/// 1-channel stride-1 convolution producing a raw patch-score map of shape
/// `(1, H/16, W/16)` for inputs whose sides are multiples of 16.
#[derive(Debug, Clone)]
pub struct Discriminator<F: Scalar> {
    stages: Vec<(Conv<F>, Option<Norm<F>>)>,
    head: Conv<F>,
}

impl<F: Scalar> Discriminator<F> {
    pub fn init(seed: u64) -> Self {
        Self::init_with_std(seed, INIT_STD)
    }

    pub fn init_with_std(seed: u64, std: f64) -> Self {
        let mut init = ParamInit::new(seed, std);
        let (stages, head) = disc_body(&mut init);
        Discriminator { stages, head }
    }

    /// Score-map forward; raw values, no squashing.
    pub fn forward(&self, g: &mut Graph<F>, img: VarId, train: bool) -> NetGraph {
        let slope = lit::<F>(LEAKY_SLOPE);
        let mut ids = Vec::new();
        let mut h = img;
        for (conv, norm) in &self.stages {
            let (w, b) = push_conv(g, conv, train, &mut ids);
            h = g.conv2d(h, w, b, 2, 1, PadMode::Zero);
            if let Some(n) = norm {
                let (gamma, beta) = push_norm(g, n, train, &mut ids);
                h = g.instance_norm(h, gamma, beta);
            }
            h = g.leaky_relu(h, slope);
        }
        let (w, b) = push_conv(g, &self.head, train, &mut ids);
        let out = g.conv2d(h, w, b, 1, 1, PadMode::Zero);
        NetGraph { out, param_ids: ids }
    }
}

impl<F: Scalar> Network<F> for Discriminator<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut ps = body_params(&self.stages);
        ps.extend([&self.head.w, &self.head.b]);
        ps
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let Discriminator { stages, head } = self;
        let mut ps = body_params_mut(stages);
        ps.extend([&mut head.w, &mut head.b]);
        ps
    }
}

/// Builds the shared four-stage body used by the discriminator and the
/// model-selection classifier: norm on stages 2–4 only.
fn disc_body<F: Scalar>(init: &mut ParamInit<F>) -> (Vec<(Conv<F>, Option<Norm<F>>)>, Conv<F>) {
    let mut stages = Vec::with_capacity(4);
    let mut cin = 3;
    for (i, &cout) in DISC_WIDTHS.iter().enumerate() {
        let conv = init.conv(cout, cin, 4);
        let norm = (i > 0).then(|| init.norm(cout));
        stages.push((conv, norm));
        cin = cout;
    }
    let head = init.conv(1, cin, 3);
    (stages, head)
}

fn body_params<F: Scalar>(stages: &[(Conv<F>, Option<Norm<F>>)]) -> Vec<&Param<F>> {
    let mut ps = Vec::new();
    for (conv, norm) in stages {
        ps.extend([&conv.w, &conv.b]);
        if let Some(n) = norm {
            ps.extend([&n.gamma, &n.beta]);
        }
    }
    ps
}

fn body_params_mut<F: Scalar>(stages: &mut [(Conv<F>, Option<Norm<F>>)]) -> Vec<&mut Param<F>> {
    let mut ps = Vec::new();
    for (conv, norm) in stages {
        ps.extend([&mut conv.w, &mut conv.b]);
        if let Some(n) = norm {
            ps.extend([&mut n.gamma, &mut n.beta]);
        }
    }
    ps
}

/// Model-selection classifier: the discriminator body with ReLU activations,
/// global average pooling, and one affine unit ending in a sigmoid — the
/// probability that its input is a real non-shadow image.
#[derive(Debug, Clone)]
pub struct Msm<F: Scalar> {
    stages: Vec<(Conv<F>, Option<Norm<F>>)>,
    head_w: Param<F>,
    head_b: Param<F>,
}

impl<F: Scalar> Msm<F> {
    pub fn init(seed: u64) -> Self {
        Self::init_with_std(seed, INIT_STD)
    }

    pub fn init_with_std(seed: u64, std: f64) -> Self {
        let mut init = ParamInit::new(seed, std);
        let mut stages = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, &cout) in DISC_WIDTHS.iter().enumerate() {
            let conv = init.conv(cout, cin, 4);
            let norm = (i > 0).then(|| init.norm(cout));
            stages.push((conv, norm));
            cin = cout;
        }
        let head_w = init.normal(&[cin]);
        let head_b = init.zeros(&[]);
        Msm {
            stages,
            head_w,
            head_b,
        }
    }

    /// Raw logit (pre-sigmoid), the numerically stable training target.
    pub fn logit_graph(&self, g: &mut Graph<F>, img: VarId, train: bool) -> NetGraph {
        let mut ids = Vec::new();
        let mut h = img;
        for (conv, norm) in &self.stages {
            let (w, b) = push_conv(g, conv, train, &mut ids);
            h = g.conv2d(h, w, b, 2, 1, PadMode::Zero);
            if let Some(n) = norm {
                let (gamma, beta) = push_norm(g, n, train, &mut ids);
                h = g.instance_norm(h, gamma, beta);
            }
            h = g.relu(h);
        }
        let pooled = g.channel_mean(h);
        let w = g.leaf(self.head_w.clone(), train);
        let b = g.leaf(self.head_b.clone(), train);
        ids.push(w);
        ids.push(b);
        let out = g.affine(pooled, w, b);
        NetGraph { out, param_ids: ids }
    }

    /// Probability in (0, 1) that the image is a real non-shadow image.
    pub fn prob_graph(&self, g: &mut Graph<F>, img: VarId, train: bool) -> NetGraph {
        let net = self.logit_graph(g, img, train);
        let out = g.sigmoid(net.out);
        NetGraph {
            out,
            param_ids: net.param_ids,
        }
    }
}

impl Msm<f32> {
    pub fn probability(&self, img: &ImageTensor) -> f32 {
        let mut g = Graph::<f32>::new();
        let xid = g.leaf(Arc::new(img.data().clone().into_dyn()), false);
        let net = self.prob_graph(&mut g, xid, false);
        g.scalar(net.out)
    }
}

impl<F: Scalar> Network<F> for Msm<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut ps = body_params(&self.stages);
        ps.extend([&self.head_w, &self.head_b]);
        ps
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let Msm {
            stages,
            head_w,
            head_b,
        } = self;
        let mut ps = body_params_mut(stages);
        ps.extend([head_w, head_b]);
        ps
    }
}
