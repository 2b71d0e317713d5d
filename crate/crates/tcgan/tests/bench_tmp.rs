//! Temporary timing probe; not part of the suite.

use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use tcgan::autodiff::Graph;
use tcgan::nn::{Discriminator, Generator, Network};

fn rand_img(rng: &mut ChaCha8Rng, s: usize) -> ArrayD<f32> {
    ArrayD::from_shape_fn(IxDyn(&[3, s, s]), |_| rng.random_range(-1.0f32..1.0))
}

#[test]
#[ignore]
fn bench_timing() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g1: Generator<f32> = Generator::init(1);
    let d1: Discriminator<f32> = Discriminator::init(3);
    let x = Arc::new(rand_img(&mut rng, 64));

    // generator forward only
    let t = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let mut g = Graph::<f32>::new();
        let xid = g.constant((*x).clone());
        let _ = g1.residual_graph(&mut g, xid, true);
    }
    println!("G fwd (train=true): {:?}/rep", t.elapsed() / reps);

    // generator forward + backward of mean(residual^2)
    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::<f32>::new();
        let xid = g.constant((*x).clone());
        let net = g1.residual_graph(&mut g, xid, true);
        let sq = g.square(net.out);
        let m = g.mean(sq);
        let _ = g.backward(m);
    }
    println!("G fwd+bwd: {:?}/rep", t.elapsed() / reps);

    // discriminator forward + backward
    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::<f32>::new();
        let xid = g.constant((*x).clone());
        let net = d1.forward(&mut g, xid, true);
        let m = g.mean(net.out);
        let _ = g.backward(m);
    }
    println!("D fwd+bwd: {:?}/rep", t.elapsed() / reps);

    // raw sgemm throughput probe at res-block shape
    let a = ndarray::Array2::<f32>::from_elem((256, 2304), 0.5);
    let b = ndarray::Array2::<f32>::from_elem((2304, 64), 0.25);
    let t = Instant::now();
    let n = 200;
    let mut acc = 0.0f32;
    for _ in 0..n {
        let c = a.dot(&b);
        acc += c[[0, 0]];
    }
    let el = t.elapsed();
    let flops = 2.0 * 256.0 * 2304.0 * 64.0 * n as f64;
    println!("sgemm 256x2304x64: {:?}/rep, {:.1} GFLOPS (acc {acc})", el / n, flops / el.as_secs_f64() / 1e9);

    // bigger matmul probe
    let a = ndarray::Array2::<f32>::from_elem((512, 512), 0.5);
    let b = ndarray::Array2::<f32>::from_elem((512, 512), 0.25);
    let t = Instant::now();
    let n = 100;
    let mut acc = 0.0f32;
    for _ in 0..n {
        let c = a.dot(&b);
        acc += c[[0, 0]];
    }
    let el = t.elapsed();
    let flops = 2.0 * 512.0f64.powi(3) * n as f64;
    println!("sgemm 512^3: {:?}/rep, {:.1} GFLOPS (acc {acc})", el / n, flops / el.as_secs_f64() / 1e9);

    let n_params: usize = g1.params().iter().map(|p| p.len()).sum();
    let d_params: usize = d1.params().iter().map(|p| p.len()).sum();
    println!("G params: {n_params}, D params: {d_params}");
}

#[test]
#[ignore]
fn bench_train_step() {
    use tcgan::data::{synthesize_corpus, SynthSpec, UnpairedDataset};
    use tcgan::train::{train_epoch, TrainConfig, TrainState};

    let tmp = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_shadow: 6,
        n_nonshadow: 6,
        image_size: 64,
        ..SynthSpec::default()
    };
    synthesize_corpus(&spec, tmp.path()).unwrap();
    let ds = UnpairedDataset::scan(tmp.path()).unwrap();
    for (pre, crop) in [(72usize, 64usize), (56, 48), (48, 40)] {
        let mut cfg = TrainConfig::default();
        cfg.sizes.pre_crop = pre;
        cfg.sizes.crop = crop;
        let mut state = TrainState::init(&cfg).unwrap();
        let t = Instant::now();
        train_epoch(&cfg, &ds, &mut state).unwrap();
        let el = t.elapsed();
        println!("crop {crop}: epoch of 6 iters, {:?}/iter", el / 6);
        tcgan::autodiff::optime::dump_and_reset();
    }
}
