//! The full optimization loop for the coupled GAN: alternating
//! generator/discriminator phases, a shared Adam step over both generators
//! (the consistency term couples their gradients, so the update must be
//! atomic), learning-rate scheduling, checkpointing, and CSV logging.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{lit, Gradients, Graph, VarId};
use crate::checkpoint::{
    read_train_snapshot, write_msm_snapshot, write_train_snapshot, MsmSnapshot, OptimSnapshot,
    RngSnapshot, TrainSnapshot,
};
use crate::data::{AugmentConfig, TrainBatch, UnpairedDataset};
use crate::error::{Error, Result};
use crate::loss::{
    combine, identity_loss, lsgan_discriminator_loss, lsgan_generator_loss, target_consistency,
    LossBundle, LossWeights,
};
use crate::nn::{Discriminator, GeneratorPair, Msm, Network, Param};
use crate::tensor::{load_image, Normalization};

/// Seeds controlling all randomness: `global` drives discriminator init,
/// data sampling, and classifier training; `g1`/`g2` are the two generator
/// initializations and must differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub global: u64,
    pub g1: u64,
    pub g2: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            global: 7,
            g1: 1,
            g2: 2,
        }
    }
}

/// Augmentation sizes: resize to `pre_crop`, crop to `crop`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sizes {
    pub pre_crop: usize,
    pub crop: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Sizes {
            pre_crop: 72,
            crop: 64,
        }
    }
}

/// Full training configuration. Unknown keys in a config file are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum1: f64,
    pub momentum2: f64,
    pub epochs_total: u32,
    pub epochs_constant: u32,
    pub batch_size: usize,
    pub init_std: f64,
    pub weights: LossWeights,
    pub seeds: Seeds,
    pub sizes: Sizes,
    pub hflip: bool,
    /// Checkpoint every this many epochs; 0 writes only the final archive.
    pub checkpoint_every: u32,
    /// Epochs of selection-classifier pre-training.
    pub msm_epochs: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 2e-4,
            momentum1: 0.5,
            momentum2: 0.999,
            epochs_total: 200,
            epochs_constant: 100,
            batch_size: 1,
            init_std: 0.02,
            weights: LossWeights::default(),
            seeds: Seeds::default(),
            sizes: Sizes::default(),
            hflip: false,
            checkpoint_every: 50,
            msm_epochs: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base_lr must be positive and finite, got {}",
                self.base_lr
            )));
        }
        for (name, m) in [("momentum1", self.momentum1), ("momentum2", self.momentum2)] {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {m}")));
            }
        }
        if self.epochs_total == 0 || self.epochs_constant > self.epochs_total {
            return Err(Error::Config(format!(
                "need 0 < epochs_constant <= epochs_total, got {} / {}",
                self.epochs_constant, self.epochs_total
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!(
                "init_std must be positive and finite, got {}",
                self.init_std
            )));
        }
        self.weights.validate()?;
        if self.seeds.g1 == self.seeds.g2 {
            return Err(Error::Config(format!(
                "generator seeds must differ, both are {}",
                self.seeds.g1
            )));
        }
        if self.sizes.crop == 0 || self.sizes.crop % 8 != 0 {
            return Err(Error::Config(format!(
                "crop size {} must be a positive multiple of 8",
                self.sizes.crop
            )));
        }
        if self.sizes.crop > self.sizes.pre_crop {
            return Err(Error::Config(format!(
                "crop size {} exceeds pre-crop size {}",
                self.sizes.crop, self.sizes.pre_crop
            )));
        }
        Ok(())
    }

    /// Strict TOML parse: unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            pre_crop: self.sizes.pre_crop,
            crop: self.sizes.crop,
            hflip: self.hflip,
        }
    }
}

/// Constant `base_lr` through `epochs_constant`, then linear decay hitting
/// exactly zero at `epochs_total`. Continuous at the knee.
pub fn lr_schedule(cfg: &TrainConfig, epoch: u32) -> Result<f64> {
    if epoch < 1 || epoch > cfg.epochs_total {
        return Err(Error::Config(format!(
            "epoch {epoch} outside schedule range 1..={}",
            cfg.epochs_total
        )));
    }
    if epoch <= cfg.epochs_constant {
        return Ok(cfg.base_lr);
    }
    let remain = (cfg.epochs_total - epoch) as f64;
    let span = (cfg.epochs_total - cfg.epochs_constant) as f64;
    Ok(cfg.base_lr * remain / span)
}

// ---- optimizer ----------------------------------------------------------

/// Adam over one parameter list. Moment accumulators are f32 like the
/// parameters; the per-element update is computed at f64.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, params: &[&Param<f32>]) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    /// One update. `grads[k] == None` means a zero gradient for parameter
    /// `k` (its moments still decay).
    pub fn step(&mut self, mut params: Vec<&mut Param<f32>>, grads: &[Option<ArrayD<f32>>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter count");
        assert_eq!(grads.len(), self.m.len(), "gradient/parameter count");
        self.step += 1;
        // Bias corrections involve β^t, which wants f64; the per-element
        // update then runs entirely in f32 so the square root and divide
        // vectorize at full width.
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ibc1 = (1.0 / bc1) as f32;
        let ibc2 = (1.0 / bc2) as f32;
        let lr32 = lr as f32;
        let eps32 = self.eps as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (k, p) in params.iter_mut().enumerate() {
            // flat slices: dynamic-dimension Zip falls back to per-element
            // index arithmetic, which dominates the whole update otherwise
            let ws = Arc::make_mut(*p)
                .as_slice_mut()
                .expect("parameter tensor is standard layout");
            let ms = self.m[k]
                .as_slice_mut()
                .expect("first moment is standard layout");
            let vs = self.v[k]
                .as_slice_mut()
                .expect("second moment is standard layout");
            match &grads[k] {
                Some(gr) => {
                    assert_eq!(gr.len(), ws.len(), "gradient shape");
                    let gs = gr.as_slice().expect("gradient is standard layout");
                    for i in 0..ws.len() {
                        let g = gs[i];
                        let m = b1 * ms[i] + (1.0 - b1) * g;
                        let v = b2 * vs[i] + (1.0 - b2) * g * g;
                        ms[i] = m;
                        vs[i] = v;
                        ws[i] -= lr32 * (m * ibc1) / ((v * ibc2).sqrt() + eps32);
                    }
                }
                None => {
                    for i in 0..ws.len() {
                        let m = b1 * ms[i];
                        let v = b2 * vs[i];
                        ms[i] = m;
                        vs[i] = v;
                        ws[i] -= lr32 * (m * ibc1) / ((v * ibc2).sqrt() + eps32);
                    }
                }
            }
        }
    }

    pub fn snapshot(&self) -> OptimSnapshot {
        OptimSnapshot {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn from_snapshot(beta1: f64, beta2: f64, snap: &OptimSnapshot) -> Result<Self> {
        if snap.m.len() != snap.v.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer moment lists disagree: {} vs {}",
                snap.m.len(),
                snap.v.len()
            )));
        }
        Ok(Adam {
            beta1,
            beta2,
            eps: 1e-8,
            step: snap.step,
            m: snap.m.clone(),
            v: snap.v.clone(),
        })
    }
}

// ---- training state -----------------------------------------------------

/// Everything that evolves during training. A snapshot/restore round-trip
/// reproduces subsequent steps bit-identically.
pub struct TrainState {
    pub gens: GeneratorPair<f32>,
    pub d1: Discriminator<f32>,
    pub d2: Discriminator<f32>,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    /// Next epoch to run, 1-based.
    pub epoch: u32,
    /// Completed training steps.
    pub iteration: u64,
    pub data_rng: ChaCha8Rng,
}

/// Auxiliary seeds derived from the global seed, in a fixed draw order.
struct DerivedSeeds {
    d1: u64,
    d2: u64,
    data: u64,
    msm: u64,
    msm_data: u64,
}

impl DerivedSeeds {
    fn from_global(global: u64) -> Self {
        let mut meta = ChaCha8Rng::seed_from_u64(global);
        DerivedSeeds {
            d1: meta.random(),
            d2: meta.random(),
            data: meta.random(),
            msm: meta.random(),
            msm_data: meta.random(),
        }
    }
}

fn clone_params(net: &impl Network<f32>) -> Vec<ArrayD<f32>> {
    net.params().iter().map(|p| (***p).clone()).collect()
}

fn load_params(net: &mut impl Network<f32>, tensors: &[ArrayD<f32>], what: &str) -> Result<()> {
    let mut ps = net.params_mut();
    if ps.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: archive has {} tensors, network expects {}",
            tensors.len(),
            ps.len()
        )));
    }
    for (k, (p, t)) in ps.iter_mut().zip(tensors).enumerate() {
        if p.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{what}: tensor {k} shape {:?} does not match network shape {:?}",
                t.shape(),
                p.shape()
            )));
        }
        **p = Arc::new(t.clone());
    }
    Ok(())
}

impl TrainState {
    /// Fresh state from config seeds.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let derived = DerivedSeeds::from_global(cfg.seeds.global);
        let gens = GeneratorPair::init_with_std(cfg.seeds.g1, cfg.seeds.g2, cfg.init_std)?;
        let d1 = Discriminator::init_with_std(derived.d1, cfg.init_std);
        let d2 = Discriminator::init_with_std(derived.d2, cfg.init_std);
        let gen_refs: Vec<&Param<f32>> = gens
            .g1
            .params()
            .into_iter()
            .chain(gens.g2.params())
            .collect();
        let disc_refs: Vec<&Param<f32>> =
            d1.params().into_iter().chain(d2.params()).collect();
        let gen_opt = Adam::new(cfg.momentum1, cfg.momentum2, &gen_refs);
        let disc_opt = Adam::new(cfg.momentum1, cfg.momentum2, &disc_refs);
        Ok(TrainState {
            gens,
            d1,
            d2,
            gen_opt,
            disc_opt,
            epoch: 1,
            iteration: 0,
            data_rng: ChaCha8Rng::seed_from_u64(derived.data),
        })
    }

    pub fn snapshot(&self) -> TrainSnapshot {
        TrainSnapshot {
            epoch: self.epoch,
            iteration: self.iteration,
            seed1: self.gens.seed1,
            seed2: self.gens.seed2,
            g1: clone_params(&self.gens.g1),
            g2: clone_params(&self.gens.g2),
            d1: clone_params(&self.d1),
            d2: clone_params(&self.d2),
            gen_opt: self.gen_opt.snapshot(),
            disc_opt: self.disc_opt.snapshot(),
            data_rng: RngSnapshot::capture(&self.data_rng),
        }
    }

    /// Rebuilds a state from an archive; `cfg` supplies the optimizer
    /// hyper-parameters, which are not stored.
    pub fn from_snapshot(snap: &TrainSnapshot, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut state = TrainState::init(&TrainConfig {
            seeds: Seeds {
                g1: snap.seed1,
                g2: snap.seed2,
                ..cfg.seeds
            },
            ..cfg.clone()
        })?;
        load_params(&mut state.gens.g1, &snap.g1, "generator 1")?;
        load_params(&mut state.gens.g2, &snap.g2, "generator 2")?;
        load_params(&mut state.d1, &snap.d1, "discriminator 1")?;
        load_params(&mut state.d2, &snap.d2, "discriminator 2")?;
        state.gen_opt = Adam::from_snapshot(cfg.momentum1, cfg.momentum2, &snap.gen_opt)?;
        state.disc_opt = Adam::from_snapshot(cfg.momentum1, cfg.momentum2, &snap.disc_opt)?;
        let n_gen: usize = state.gens.g1.params().len() + state.gens.g2.params().len();
        if state.gen_opt.m.len() != n_gen {
            return Err(Error::Checkpoint(format!(
                "generator optimizer has {} moment tensors, expected {n_gen}",
                state.gen_opt.m.len()
            )));
        }
        let n_disc = state.d1.params().len() + state.d2.params().len();
        if state.disc_opt.m.len() != n_disc {
            return Err(Error::Checkpoint(format!(
                "discriminator optimizer has {} moment tensors, expected {n_disc}",
                state.disc_opt.m.len()
            )));
        }
        state.epoch = snap.epoch;
        state.iteration = snap.iteration;
        state.data_rng = snap.data_rng.restore();
        Ok(state)
    }
}

// ---- the training step --------------------------------------------------

fn retag(e: Error, iteration: u64) -> Error {
    match e {
        Error::NonFinite { term, .. } => Error::NonFinite { term, iteration },
        other => other,
    }
}

/// Sums gradients that a backward pass produced for the same underlying
/// parameter through several forward passes (each pass inserts its own
/// leaf, so the chain rule contributions arrive under different ids).
/// Consumes the per-leaf tensors so the first contribution moves for free.
fn summed_grads(
    grads: &mut Gradients<f32>,
    id_lists: &[&[VarId]],
    count: usize,
) -> Vec<Option<ArrayD<f32>>> {
    let mut out: Vec<Option<ArrayD<f32>>> = (0..count).map(|_| None).collect();
    for list in id_lists {
        assert_eq!(list.len(), count, "parameter id list length");
        for (k, &id) in list.iter().enumerate() {
            if let Some(gr) = grads.take(id) {
                match &mut out[k] {
                    Some(acc) => *acc += &gr,
                    None => out[k] = Some(gr),
                }
            }
        }
    }
    out
}

/// Generator phase: forwards both generators on every x (adversarial + tc)
/// and on the paired real samples (identity), takes one joint Adam step,
/// and returns the averaged loss bundle plus the composed fakes for the
/// discriminator phase.
fn generator_phase(
    state: &mut TrainState,
    batches: &[TrainBatch],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(LossBundle, Vec<(ArrayD<f32>, ArrayD<f32>)>)> {
    let iter = state.iteration;
    let bw = 1.0 / batches.len() as f64;
    let mut g = Graph::<f32>::new();
    let mut totals: Vec<(VarId, f32)> = Vec::with_capacity(batches.len());
    let mut agg = LossBundle {
        gan1: 0.0,
        gan2: 0.0,
        tc: 0.0,
        idt1: 0.0,
        idt2: 0.0,
        total: 0.0,
    };
    let mut g1_lists: Vec<Vec<VarId>> = Vec::new();
    let mut g2_lists: Vec<Vec<VarId>> = Vec::new();
    let mut fakes = Vec::with_capacity(batches.len());

    for b in batches {
        let x = g.constant(b.x.data().clone().into_dyn());
        let y1 = g.constant(b.y1.data().clone().into_dyn());
        let y2 = g.constant(b.y2.data().clone().into_dyn());
        let n1 = state.gens.g1.residual_graph(&mut g, x, true);
        let n2 = state.gens.g2.residual_graph(&mut g, x, true);
        // fakes stay unclamped here: clamping would zero gradients at the
        // range boundary; outputs are clamped at inference instead
        let fake1 = g.add(x, n1.out);
        let fake2 = g.add(x, n2.out);
        let s1 = state.d1.forward(&mut g, fake1, false);
        let s2 = state.d2.forward(&mut g, fake2, false);
        let gan1 = lsgan_generator_loss(&mut g, s1.out);
        let gan2 = lsgan_generator_loss(&mut g, s2.out);
        let tc = target_consistency(&mut g, x, n1.out, n2.out)?;
        let i1 = state.gens.g1.residual_graph(&mut g, y1, true);
        let i2 = state.gens.g2.residual_graph(&mut g, y2, true);
        let idt1 = identity_loss(&mut g, i1.out);
        let idt2 = identity_loss(&mut g, i2.out);
        let (total, bundle) = combine(&mut g, &cfg.weights, gan1, gan2, tc, idt1, idt2)
            .map_err(|e| retag(e, iter))?;
        totals.push((total, lit::<f32>(bw)));
        agg.gan1 += bw * bundle.gan1;
        agg.gan2 += bw * bundle.gan2;
        agg.tc += bw * bundle.tc;
        agg.idt1 += bw * bundle.idt1;
        agg.idt2 += bw * bundle.idt2;
        agg.total += bw * bundle.total;
        g1_lists.push(n1.param_ids);
        g1_lists.push(i1.param_ids);
        g2_lists.push(n2.param_ids);
        g2_lists.push(i2.param_ids);
        fakes.push((g.value(fake1).clone(), g.value(fake2).clone()));
    }

    let root = g.weighted_sum(&totals);
    let mut grads = {
        let _t = crate::autodiff::optime::start("gen backward total");
        g.backward(root)
    };
    let n1 = state.gens.g1.params().len();
    let n2 = state.gens.g2.params().len();
    let lists1: Vec<&[VarId]> = g1_lists.iter().map(|v| v.as_slice()).collect();
    let lists2: Vec<&[VarId]> = g2_lists.iter().map(|v| v.as_slice()).collect();
    let all = {
        let _t = crate::autodiff::optime::start("gen summed_grads");
        let mut all = summed_grads(&mut grads, &lists1, n1);
        all.extend(summed_grads(&mut grads, &lists2, n2));
        all
    };
    // release the tape before the update so the parameter Arcs are uniquely
    // held and the optimizer can write in place instead of copying
    {
        let _t = crate::autodiff::optime::start("gen drop tape");
        drop(grads);
        drop(g);
    }
    let _t = crate::autodiff::optime::start("gen adam");
    let mut params = state.gens.g1.params_mut();
    params.extend(state.gens.g2.params_mut());
    state.gen_opt.step(params, &all, lr);
    Ok((agg, fakes))
}

/// Discriminator phase: each discriminator scores its real sample and the
/// detached fake from the generator phase; one joint Adam step over the
/// (disjoint) parameter lists.
fn discriminator_phase(
    state: &mut TrainState,
    batches: &[TrainBatch],
    fakes: &[(ArrayD<f32>, ArrayD<f32>)],
    lr: f64,
) -> Result<()> {
    let iter = state.iteration;
    let bw = lit::<f32>(1.0 / batches.len() as f64);
    let mut g = Graph::<f32>::new();
    let mut terms: Vec<(VarId, f32)> = Vec::new();
    let mut d1_lists: Vec<Vec<VarId>> = Vec::new();
    let mut d2_lists: Vec<Vec<VarId>> = Vec::new();

    for (b, (f1, f2)) in batches.iter().zip(fakes) {
        let y1 = g.constant(b.y1.data().clone().into_dyn());
        let y2 = g.constant(b.y2.data().clone().into_dyn());
        let fake1 = g.constant(f1.clone());
        let fake2 = g.constant(f2.clone());
        for (d, real, fake, lists, term) in [
            (&state.d1, y1, fake1, &mut d1_lists, "disc1"),
            (&state.d2, y2, fake2, &mut d2_lists, "disc2"),
        ] {
            let sr = d.forward(&mut g, real, true);
            let sf = d.forward(&mut g, fake, true);
            let loss = lsgan_discriminator_loss(&mut g, sr.out, sf.out);
            if !g.scalar(loss).is_finite() {
                return Err(Error::NonFinite {
                    term,
                    iteration: iter,
                });
            }
            terms.push((loss, bw));
            lists.push(sr.param_ids);
            lists.push(sf.param_ids);
        }
    }

    let root = g.weighted_sum(&terms);
    let mut grads = g.backward(root);
    let n1 = state.d1.params().len();
    let n2 = state.d2.params().len();
    let lists1: Vec<&[VarId]> = d1_lists.iter().map(|v| v.as_slice()).collect();
    let lists2: Vec<&[VarId]> = d2_lists.iter().map(|v| v.as_slice()).collect();
    let mut all = summed_grads(&mut grads, &lists1, n1);
    all.extend(summed_grads(&mut grads, &lists2, n2));
    drop(grads);
    drop(g);
    let mut params = state.d1.params_mut();
    params.extend(state.d2.params_mut());
    state.disc_opt.step(params, &all, lr);
    Ok(())
}

/// One alternating step: generator phase, then discriminator phase on the
/// detached fakes. `batches` usually holds `batch_size` samples.
pub fn train_step(
    state: &mut TrainState,
    batches: &[TrainBatch],
    cfg: &TrainConfig,
) -> Result<LossBundle> {
    if batches.is_empty() {
        return Err(Error::InvalidInput {
            context: "train step",
            reason: "empty batch list".into(),
        });
    }
    let lr = lr_schedule(cfg, state.epoch)?;
    let (bundle, fakes) = {
        let _t = crate::autodiff::optime::start("gen phase total");
        generator_phase(state, batches, cfg, lr)?
    };
    {
        let _t = crate::autodiff::optime::start("disc phase total");
        discriminator_phase(state, batches, &fakes, lr)?;
    }
    state.iteration += 1;
    Ok(bundle)
}

/// One pass over the shadow list (`ceil(n / batch_size)` steps), advancing
/// `state.epoch` at the end.
pub fn train_epoch(
    cfg: &TrainConfig,
    dataset: &UnpairedDataset,
    state: &mut TrainState,
) -> Result<Vec<LossBundle>> {
    let aug = cfg.augment();
    let steps = dataset.shadow_paths.len().div_ceil(cfg.batch_size);
    let mut bundles = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batches: Vec<TrainBatch> = {
            let _t = crate::autodiff::optime::start("batch load+augment");
            (0..cfg.batch_size)
                .map(|_| dataset.next_batch(&mut state.data_rng, &aug))
                .collect::<Result<_>>()?
        };
        bundles.push(train_step(state, &batches, cfg)?);
    }
    state.epoch += 1;
    Ok(bundles)
}

fn append_lines(path: &Path, header: &str, lines: &[String], fresh: bool) -> Result<()> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(header);
        text.push('\n');
    }
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs `state` through the remaining epochs with per-epoch learning rates,
/// CSV logs (`losses.csv`, `lr.csv`), periodic checkpoints, and a final
/// `final.ckpt` under `out_dir`.
pub fn train_loop(
    cfg: &TrainConfig,
    dataset: &UnpairedDataset,
    out_dir: &Path,
    mut state: TrainState,
) -> Result<TrainState> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let losses_csv = out_dir.join("losses.csv");
    let lr_csv = out_dir.join("lr.csv");
    let mut fresh = state.iteration == 0;
    while state.epoch <= cfg.epochs_total {
        let epoch = state.epoch;
        let lr = lr_schedule(cfg, epoch)?;
        let bundles = train_epoch(cfg, dataset, &mut state)?;
        let first_iter = state.iteration - bundles.len() as u64;
        let rows: Vec<String> = bundles
            .iter()
            .enumerate()
            .map(|(k, b)| b.csv_row(first_iter + k as u64))
            .collect();
        append_lines(&losses_csv, LossBundle::csv_header(), &rows, fresh)?;
        append_lines(&lr_csv, "epoch,lr", &[format!("{epoch},{lr}")], fresh)?;
        fresh = false;
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            let path = out_dir.join(format!("checkpoint-e{epoch:04}.ckpt"));
            write_train_snapshot(&path, &state.snapshot())?;
        }
    }
    write_train_snapshot(&out_dir.join("final.ckpt"), &state.snapshot())?;
    Ok(state)
}

/// Full training from scratch.
pub fn train(cfg: &TrainConfig, dataset: &UnpairedDataset, out_dir: &Path) -> Result<TrainState> {
    let state = TrainState::init(cfg)?;
    train_loop(cfg, dataset, out_dir, state)
}

/// Resume from a checkpoint archive.
pub fn resume(
    cfg: &TrainConfig,
    dataset: &UnpairedDataset,
    out_dir: &Path,
    checkpoint: &Path,
) -> Result<TrainState> {
    let snap = read_train_snapshot(checkpoint)?;
    let state = TrainState::from_snapshot(&snap, cfg)?;
    train_loop(cfg, dataset, out_dir, state)
}

// ---- selection-classifier pre-training ----------------------------------

/// Result of classifier pre-training.
pub struct MsmTraining {
    pub msm: Msm<f32>,
    pub holdout_accuracy: f64,
    pub holdout_size: usize,
}

/// Binary cross-entropy pre-training of the selection classifier: shadow
/// images are labeled 0, real non-shadow images 1. Every fifth image of
/// each class is held out; the report carries held-out accuracy.
pub fn train_msm(cfg: &TrainConfig, dataset: &UnpairedDataset) -> Result<MsmTraining> {
    cfg.validate()?;
    let derived = DerivedSeeds::from_global(cfg.seeds.global);
    let mut msm = Msm::init_with_std(derived.msm, cfg.init_std);
    let mut rng = ChaCha8Rng::seed_from_u64(derived.msm_data);
    let aug = cfg.augment();

    // (path, label): label 1 = real non-shadow
    let mut train_items: Vec<(&Path, f32)> = Vec::new();
    let mut holdout_items: Vec<(&Path, f32)> = Vec::new();
    for (paths, label) in [
        (&dataset.shadow_paths, 0.0f32),
        (&dataset.nonshadow_paths, 1.0f32),
    ] {
        for (i, p) in paths.iter().enumerate() {
            if i % 5 == 0 {
                holdout_items.push((p, label));
            } else {
                train_items.push((p, label));
            }
        }
    }
    let has = |items: &[(&Path, f32)], l: f32| items.iter().any(|&(_, il)| il == l);
    for l in [0.0, 1.0] {
        if !has(&train_items, l) || !has(&holdout_items, l) {
            return Err(Error::Data(
                "degenerate classifier split: a class is missing from train or hold-out".into(),
            ));
        }
    }

    let n_params = msm.params().len();
    let mut opt = Adam::new(
        cfg.momentum1,
        cfg.momentum2,
        &msm.params().into_iter().collect::<Vec<_>>(),
    );
    let mut iteration = 0u64;
    for _ in 0..cfg.msm_epochs {
        train_items.shuffle(&mut rng);
        for &(path, label) in &train_items {
            let img = augment_from(path, &mut rng, &aug)?;
            let mut g = Graph::<f32>::new();
            let x = g.constant(img.data().clone().into_dyn());
            let net = msm.logit_graph(&mut g, x, true);
            // numerically stable BCE with logits: softplus(z) − t·z
            let sp = g.softplus(net.out);
            let loss = if label > 0.5 { g.sub(sp, net.out) } else { sp };
            if !g.scalar(loss).is_finite() {
                return Err(Error::NonFinite {
                    term: "msm_bce",
                    iteration,
                });
            }
            let mut grads = g.backward(loss);
            let ids: &[VarId] = &net.param_ids;
            let gs = summed_grads(&mut grads, &[ids], n_params);
            drop(grads);
            drop(g);
            opt.step(msm.params_mut(), &gs, cfg.base_lr);
            iteration += 1;
        }
    }

    let mut correct = 0usize;
    for &(path, label) in &holdout_items {
        let img = augment_from(path, &mut rng, &aug)?;
        let p = msm.probability(&img);
        if (p >= 0.5) == (label > 0.5) {
            correct += 1;
        }
    }
    Ok(MsmTraining {
        msm,
        holdout_accuracy: correct as f64 / holdout_items.len() as f64,
        holdout_size: holdout_items.len(),
    })
}

fn augment_from(
    path: &Path,
    rng: &mut ChaCha8Rng,
    aug: &AugmentConfig,
) -> Result<crate::tensor::ImageTensor> {
    crate::data::augment(&load_image(path, Normalization::SignedUnit)?, rng, aug)
}

/// Rebuilds just the generator pair from a training archive, for
/// inference-side consumers that need no optimizer state.
pub fn load_generator_pair(snap: &TrainSnapshot) -> Result<GeneratorPair<f32>> {
    let mut gens = GeneratorPair::init(snap.seed1, snap.seed2)?;
    load_params(&mut gens.g1, &snap.g1, "generator 1")?;
    load_params(&mut gens.g2, &snap.g2, "generator 2")?;
    Ok(gens)
}

/// Persists a trained classifier.
pub fn save_msm(path: &Path, training: &MsmTraining) -> Result<()> {
    write_msm_snapshot(
        path,
        &MsmSnapshot {
            params: clone_params(&training.msm),
            holdout_accuracy: training.holdout_accuracy,
        },
    )
}

/// Loads a classifier archive into a network.
pub fn load_msm(path: &Path) -> Result<(Msm<f32>, f64)> {
    let snap = crate::checkpoint::read_msm_snapshot(path)?;
    let mut msm = Msm::init(0);
    load_params(&mut msm, &snap.params, "selection classifier")?;
    Ok((msm, snap.holdout_accuracy))
}
