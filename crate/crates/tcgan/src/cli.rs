//! Command-line surface: one binary with `train`, `train-msm`, `infer`,
//! `eval`, `synth`, and `dump-features` subcommands, a strict TOML config
//! loader, and a run manifest written into every output location.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric
//! divergence. The `TCGAN_SEED` environment variable overrides the global
//! seed of any command that draws randomness.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::read_train_snapshot;
use crate::data::{synthesize_corpus, SynthSpec, UnpairedDataset};
use crate::error::{Error, Result};
use crate::infer::{dump_ste_features, remove_shadow, remove_shadow_fixed};
use crate::metrics::{
    extract_features, fid, kid, kid_default_params, masked_rmse, rmse_n_i, ColorSpace, EvalReport,
    FeatureExtractor, Region, RpConv64,
};
use crate::tensor::{load_image, load_mask, resize_bicubic, save_image, ImageTensor, Normalization};
use crate::train::{
    load_generator_pair, load_msm, resume, save_msm, train, train_msm, TrainConfig,
};

pub const SEED_ENV: &str = "TCGAN_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "tcgan",
    version,
    about = "Unsupervised shadow removal with coupled consistency-tied GANs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the dual generator/discriminator networks.
    Train {
        /// TOML training config; absent keys take the published defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root containing shadow/ and nonshadow/ directories.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and CSV logs.
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint archive.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Pre-train the selection classifier (non-shadow = positive class).
    TrainMsm {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output classifier archive file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove shadows from an image or a directory of images.
    Infer {
        /// Training checkpoint holding both generators.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Classifier archive; required for --branch msm.
        #[arg(long)]
        msm: Option<PathBuf>,
        /// Input image file or directory.
        #[arg(long)]
        input: PathBuf,
        /// Output directory.
        #[arg(long)]
        output: PathBuf,
        /// Which branch emits the result.
        #[arg(long, value_enum, default_value = "msm")]
        branch: Branch,
        /// Also write both branch candidates per image into a candidates/
        /// subdirectory (msm branch only).
        #[arg(long)]
        dump_candidates: bool,
    },
    /// Compute FID/KID/masked-RMSE between image sets.
    Eval {
        /// Directory of predicted (restored) images.
        #[arg(long)]
        pred: PathBuf,
        /// Reference directory: distribution target for fid/kid, paired
        /// ground truth (matched by file stem) for rmse.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Mask directory (matched by stem, binarized at 0.5); required
        /// for rmse.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Original shadow inputs (matched by stem) enabling the N-I
        /// column.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Comma-separated metric list.
        #[arg(long, value_enum, value_delimiter = ',', required = true)]
        metrics: Vec<Metric>,
        /// Color space for rmse.
        #[arg(long, default_value = "lab")]
        space: String,
        /// Output JSON report path.
        #[arg(long)]
        report: PathBuf,
    },
    /// Generate the deterministic synthetic shadow corpus.
    Synth {
        /// TOML corpus spec; absent keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the corpus seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of shadow images.
        #[arg(long)]
        n_shadow: Option<usize>,
        /// Override the number of non-shadow images.
        #[arg(long)]
        n_nonshadow: Option<usize>,
        /// Override the square image size (multiple of 8).
        #[arg(long)]
        size: Option<usize>,
        /// Output corpus root.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export encoder feature-map grids for one image.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image file.
        #[arg(long)]
        input: PathBuf,
        /// Leading channels to render (1..=256).
        #[arg(long, default_value_t = 10)]
        channels: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Branch {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "msm")]
    Msm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Fid,
    Kid,
    Rmse,
}

/// Provenance record written at the end of every run.
#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seeds: serde_json::Value,
    code_version: &'static str,
    started_at: String,
    finished_at: String,
    outputs: Vec<String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn write_manifest(dir_or_file: &Path, manifest: &RunManifest) -> Result<()> {
    let path = if dir_or_file.is_dir() {
        dir_or_file.join("run-manifest.json")
    } else {
        dir_or_file.with_extension("manifest.json")
    };
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a valid seed"))),
        Err(_) => Ok(None),
    }
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = env_seed()? {
        cfg.seeds.global = seed;
    }
    Ok(cfg)
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// Dispatches one parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    let started_at = now();
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            resume: resume_from,
        } => {
            let cfg = load_train_config(config.as_deref())?;
            let dataset = UnpairedDataset::scan(&data)?;
            let state = match &resume_from {
                Some(ckpt) => resume(&cfg, &dataset, &out, ckpt)?,
                None => train(&cfg, &dataset, &out)?,
            };
            eprintln!(
                "training finished: {} epochs, {} iterations",
                state.epoch - 1,
                state.iteration
            );
            write_manifest(
                &out,
                &RunManifest {
                    command: "train".into(),
                    config: to_json(&cfg),
                    seeds: to_json(&cfg.seeds),
                    code_version: env!("CARGO_PKG_VERSION"),
                    started_at,
                    finished_at: now(),
                    outputs: vec![
                        out.join("final.ckpt").display().to_string(),
                        out.join("losses.csv").display().to_string(),
                        out.join("lr.csv").display().to_string(),
                    ],
                },
            )
        }
        Command::TrainMsm { config, data, out } => {
            let cfg = load_train_config(config.as_deref())?;
            let dataset = UnpairedDataset::scan(&data)?;
            let trained = train_msm(&cfg, &dataset)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            save_msm(&out, &trained)?;
            eprintln!(
                "classifier held-out accuracy: {:.4} over {} images",
                trained.holdout_accuracy, trained.holdout_size
            );
            write_manifest(
                &out,
                &RunManifest {
                    command: "train-msm".into(),
                    config: to_json(&cfg),
                    seeds: to_json(&cfg.seeds),
                    code_version: env!("CARGO_PKG_VERSION"),
                    started_at,
                    finished_at: now(),
                    outputs: vec![out.display().to_string()],
                },
            )
        }
        Command::Infer {
            checkpoint,
            msm,
            input,
            output,
            branch,
            dump_candidates,
        } => {
            let classifier = match (branch, &msm) {
                (Branch::Msm, Some(path)) => Some(load_msm(path)?.0),
                (Branch::Msm, None) => {
                    return Err(Error::Config(
                        "--branch msm requires --msm <classifier archive>".into(),
                    ))
                }
                _ => None,
            };
            let snap = read_train_snapshot(&checkpoint)?;
            let gens = load_generator_pair(&snap)?;
            fs::create_dir_all(&output).map_err(|e| Error::io(&output, e))?;
            let candidates_dir = output.join("candidates");
            if dump_candidates {
                fs::create_dir_all(&candidates_dir).map_err(|e| Error::io(&candidates_dir, e))?;
            }
            let inputs = collect_images(&input)?;
            let mut outputs = Vec::new();
            let mut selection_rows = vec!["file,prob1,prob2,selected_branch".to_string()];
            for path in &inputs {
                let img = load_image(path, Normalization::SignedUnit)?;
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("image")
                    .to_string();
                let (work, orig) = to_valid_size(&img)?;
                let restored = match (branch, &classifier) {
                    (Branch::One, _) => remove_shadow_fixed(&gens.g1, &work)?,
                    (Branch::Two, _) => remove_shadow_fixed(&gens.g2, &work)?,
                    (Branch::Msm, Some(msm)) => {
                        let result = remove_shadow(&gens, msm, &work)?;
                        selection_rows.push(format!(
                            "{},{},{},{}",
                            path.display(),
                            result.prob1,
                            result.prob2,
                            result.selected_branch
                        ));
                        if dump_candidates {
                            for (tag, cand) in
                                [("branch1", &result.y1), ("branch2", &result.y2)]
                            {
                                let p = candidates_dir.join(format!("{stem}-{tag}.png"));
                                save_image(&from_valid_size(cand, orig)?, &p)?;
                                outputs.push(p.display().to_string());
                            }
                        }
                        result.selected
                    }
                    (Branch::Msm, None) => unreachable!("guarded above"),
                };
                let out_path = output.join(format!("{stem}.png"));
                save_image(&from_valid_size(&restored, orig)?, &out_path)?;
                outputs.push(out_path.display().to_string());
            }
            if branch == Branch::Msm {
                let csv = output.join("selection.csv");
                fs::write(&csv, selection_rows.join("\n") + "\n")
                    .map_err(|e| Error::io(&csv, e))?;
                outputs.push(csv.display().to_string());
            }
            write_manifest(
                &output,
                &RunManifest {
                    command: "infer".into(),
                    config: serde_json::json!({
                        "checkpoint": checkpoint.display().to_string(),
                        "msm": msm.as_ref().map(|p| p.display().to_string()),
                        "branch": format!("{branch:?}").to_lowercase(),
                        "dump_candidates": dump_candidates,
                    }),
                    seeds: serde_json::json!({
                        "generator1": snap.seed1,
                        "generator2": snap.seed2,
                    }),
                    code_version: env!("CARGO_PKG_VERSION"),
                    started_at,
                    finished_at: now(),
                    outputs,
                },
            )
        }
        Command::Eval {
            pred,
            reference,
            mask,
            input,
            metrics,
            space,
            report,
        } => {
            let space: ColorSpace = space.parse()?;
            let result = run_eval(&pred, &reference, mask.as_deref(), input.as_deref(), &metrics, space)?;
            let json = serde_json::to_string_pretty(&result)
                .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
            fs::write(&report, &json).map_err(|e| Error::io(&report, e))?;
            println!("{json}");
            write_manifest(
                &report,
                &RunManifest {
                    command: "eval".into(),
                    config: serde_json::json!({
                        "pred": pred.display().to_string(),
                        "ref": reference.display().to_string(),
                        "mask": mask.as_ref().map(|p| p.display().to_string()),
                        "input": input.as_ref().map(|p| p.display().to_string()),
                        "metrics": metrics.iter().map(|m| format!("{m:?}").to_lowercase()).collect::<Vec<_>>(),
                        "space": space,
                    }),
                    seeds: serde_json::json!({ "kid_rng": env_seed()?.unwrap_or(0) }),
                    code_version: env!("CARGO_PKG_VERSION"),
                    started_at,
                    finished_at: now(),
                    outputs: vec![report.display().to_string()],
                },
            )
        }
        Command::Synth {
            config,
            seed,
            n_shadow,
            n_nonshadow,
            size,
            out,
        } => {
            let mut spec = match &config {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    toml::from_str::<SynthSpec>(&text)
                        .map_err(|e| Error::Config(format!("corpus spec parse: {e}")))?
                }
                None => SynthSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(n) = n_shadow {
                spec.n_shadow = n;
            }
            if let Some(n) = n_nonshadow {
                spec.n_nonshadow = n;
            }
            if let Some(s) = size {
                spec.image_size = s;
            }
            if let Some(s) = env_seed()? {
                spec.seed = s;
            }
            let layout = synthesize_corpus(&spec, &out)?;
            eprintln!(
                "corpus written: {} shadow, {} non-shadow images under {}",
                layout.n_shadow,
                layout.n_nonshadow,
                layout.root.display()
            );
            write_manifest(
                &out,
                &RunManifest {
                    command: "synth".into(),
                    config: to_json(&spec),
                    seeds: to_json(&spec.seed),
                    code_version: env!("CARGO_PKG_VERSION"),
                    started_at,
                    finished_at: now(),
                    outputs: vec![layout.manifest.display().to_string()],
                },
            )
        }
        Command::DumpFeatures {
            checkpoint,
            input,
            channels,
            out,
        } => {
            let snap = read_train_snapshot(&checkpoint)?;
            let gens = load_generator_pair(&snap)?;
            let img = load_image(&input, Normalization::SignedUnit)?;
            let (work, _) = to_valid_size(&img)?;
            let dump = dump_ste_features(&gens, &work, channels, &out)?;
            write_manifest(
                &out,
                &RunManifest {
                    command: "dump-features".into(),
                    config: serde_json::json!({
                        "checkpoint": checkpoint.display().to_string(),
                        "input": input.display().to_string(),
                        "channels": channels,
                    }),
                    seeds: serde_json::json!({
                        "generator1": snap.seed1,
                        "generator2": snap.seed2,
                    }),
                    code_version: env!("CARGO_PKG_VERSION"),
                    started_at,
                    finished_at: now(),
                    outputs: dump
                        .grids
                        .iter()
                        .chain(dump.raws.iter())
                        .map(|p| p.display().to_string())
                        .collect(),
                },
            )
        }
    }
}

/// A single image file, or every image directly inside a directory.
fn collect_images(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if input.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && matches!(
                        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                        Some("png" | "jpg" | "jpeg")
                    )
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Data(format!(
                "no images found in {}",
                input.display()
            )));
        }
        return Ok(paths);
    }
    Err(Error::Data(format!("input {} does not exist", input.display())))
}

/// The networks need sides that are multiples of 8; other inputs are
/// bicubic-resized to the nearest valid size and back after restoration.
fn to_valid_size(img: &ImageTensor) -> Result<(ImageTensor, Option<(usize, usize)>)> {
    let (_, h, w) = img.data().dim();
    let round8 = |n: usize| (((n as f64 / 8.0).round() as usize) * 8).max(8);
    let (vh, vw) = (round8(h), round8(w));
    if (vh, vw) == (h, w) {
        Ok((img.clone(), None))
    } else {
        Ok((resize_bicubic(img, vh, vw)?, Some((h, w))))
    }
}

fn from_valid_size(img: &ImageTensor, original: Option<(usize, usize)>) -> Result<ImageTensor> {
    match original {
        Some((h, w)) => resize_bicubic(img, h, w),
        None => Ok(img.clone()),
    }
}

fn stem_of(p: &Path) -> String {
    p.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

fn find_by_stem(dir: &Path, stem: &str) -> Result<PathBuf> {
    for ext in ["png", "jpg", "jpeg"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Data(format!(
        "no file with stem {stem:?} in {}",
        dir.display()
    )))
}

fn run_eval(
    pred_dir: &Path,
    ref_dir: &Path,
    mask_dir: Option<&Path>,
    input_dir: Option<&Path>,
    metrics: &[Metric],
    space: ColorSpace,
) -> Result<EvalReport> {
    let pred_paths = collect_images(pred_dir)?;
    let mut report = EvalReport::default();

    if metrics.contains(&Metric::Fid) || metrics.contains(&Metric::Kid) {
        let ref_paths = collect_images(ref_dir)?;
        let load_all = |paths: &[PathBuf]| -> Result<Vec<ImageTensor>> {
            paths
                .iter()
                .map(|p| load_image(p, Normalization::SignedUnit))
                .collect()
        };
        let extractor = RpConv64::new();
        let pred_feats = extract_features(&load_all(&pred_paths)?, &extractor)?;
        let ref_feats = extract_features(&load_all(&ref_paths)?, &extractor)?;
        if metrics.contains(&Metric::Fid) {
            report.fid = Some(fid(&pred_feats, &ref_feats)?);
        }
        if metrics.contains(&Metric::Kid) {
            let (subset, n_subsets) = kid_default_params(pred_feats.len(), ref_feats.len());
            let mut rng = ChaCha8Rng::seed_from_u64(env_seed()?.unwrap_or(0));
            let (mean, std) = kid(&pred_feats, &ref_feats, subset, n_subsets, &mut rng)?;
            report.kid_mean = Some(mean);
            report.kid_std = Some(std);
        }
        report.extractor_id = Some(extractor.id().to_string());
    }

    if metrics.contains(&Metric::Rmse) {
        let mask_dir = mask_dir.ok_or_else(|| {
            Error::Config("rmse requires --mask <dir> with per-image masks".into())
        })?;
        let mut sums = [0.0f64; 4]; // S, N, A, N-I
        let mut counts = [0usize; 4];
        for p in &pred_paths {
            let stem = stem_of(p);
            let pred = load_image(p, Normalization::SignedUnit)?;
            let reference = load_image(&find_by_stem(ref_dir, &stem)?, Normalization::SignedUnit)?;
            let mask = load_mask(&find_by_stem(mask_dir, &stem)?)?.binarized(0.5);
            for (slot, region) in [(0, Region::S), (1, Region::N), (2, Region::A)] {
                match masked_rmse(&pred, &reference, &mask, region, space) {
                    Ok(v) => {
                        sums[slot] += v;
                        counts[slot] += 1;
                    }
                    // an image whose mask covers nothing (or everything)
                    // simply contributes no sample to that region's mean
                    Err(Error::InvalidInput { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            if let Some(dir) = input_dir {
                let input = load_image(&find_by_stem(dir, &stem)?, Normalization::SignedUnit)?;
                match rmse_n_i(&pred, &input, &mask, space) {
                    Ok(v) => {
                        sums[3] += v;
                        counts[3] += 1;
                    }
                    Err(Error::InvalidInput { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        let mean = |slot: usize| -> Result<f64> {
            if counts[slot] == 0 {
                return Err(Error::Data(
                    "rmse region selected no pixels in any image".into(),
                ));
            }
            Ok(sums[slot] / counts[slot] as f64)
        };
        report.rmse_s = Some(mean(0)?);
        report.rmse_n = Some(mean(1)?);
        report.rmse_a = Some(mean(2)?);
        if input_dir.is_some() {
            report.rmse_n_i = Some(mean(3)?);
        }
        report.color_space = Some(space);
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn branch_and_metric_values_parse() {
        let cli = Cli::try_parse_from([
            "tcgan", "infer", "--checkpoint", "c", "--input", "i", "--output", "o", "--branch",
            "2",
        ])
        .unwrap();
        match cli.command {
            Command::Infer { branch, .. } => assert_eq!(branch, Branch::Two),
            _ => panic!("wrong subcommand"),
        }
        let cli = Cli::try_parse_from([
            "tcgan", "eval", "--pred", "p", "--ref", "r", "--metrics", "fid,kid", "--report",
            "out.json",
        ])
        .unwrap();
        match cli.command {
            Command::Eval { metrics, .. } => {
                assert_eq!(metrics, vec![Metric::Fid, Metric::Kid])
            }
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn eval_requires_metrics_flag() {
        let res = Cli::try_parse_from([
            "tcgan", "eval", "--pred", "p", "--ref", "r", "--report", "out.json",
        ]);
        assert!(res.is_err());
    }

    #[test]
    fn valid_size_roundtrip() {
        let img = ImageTensor::from_array(ndarray::Array3::zeros((3, 70, 50))).unwrap();
        let (work, orig) = to_valid_size(&img).unwrap();
        assert_eq!(work.data().dim(), (3, 72, 48));
        assert_eq!(orig, Some((70, 50)));
        let back = from_valid_size(&work, orig).unwrap();
        assert_eq!(back.data().dim(), (3, 70, 50));

        let ok = ImageTensor::from_array(ndarray::Array3::zeros((3, 64, 64))).unwrap();
        let (same, orig) = to_valid_size(&ok).unwrap();
        assert_eq!(same.data().dim(), (3, 64, 64));
        assert_eq!(orig, None);
    }
}
