//! Unpaired dataset handling, training-batch sampling, augmentation, and a
//! deterministic synthetic shadow corpus for desk-scale runs.
//!
//! The sampler enforces the coupled-GAN feeding rule: each batch carries one
//! shadow image plus two real non-shadow images drawn without replacement,
//! so the two discriminators never see the same real sample in a step.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{load_image, resize_bicubic, ImageTensor, Normalization};

/// Ordered, disjoint lists of shadow (domain X) and non-shadow (domain Y)
/// image paths.
#[derive(Debug, Clone)]
pub struct UnpairedDataset {
    pub shadow_paths: Vec<PathBuf>,
    pub nonshadow_paths: Vec<PathBuf>,
}

/// One training batch: a shadow image and two distinct real non-shadow
/// images, one per discriminator.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x: ImageTensor,
    pub y1: ImageTensor,
    pub y2: ImageTensor,
    /// Dataset indices `(x, y1, y2)`; the two y indices are always distinct.
    pub indices: (usize, usize, usize),
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn scan_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    paths.sort();
    Ok(paths)
}

impl UnpairedDataset {
    /// Scans `root/shadow` and `root/nonshadow` for images, sorted by name.
    pub fn scan(root: &Path) -> Result<Self> {
        let shadow_paths = scan_dir(&root.join("shadow"))?;
        let nonshadow_paths = scan_dir(&root.join("nonshadow"))?;
        Self::new(shadow_paths, nonshadow_paths)
    }

    pub fn new(shadow_paths: Vec<PathBuf>, nonshadow_paths: Vec<PathBuf>) -> Result<Self> {
        if shadow_paths.is_empty() {
            return Err(Error::Data("shadow image list is empty".into()));
        }
        if nonshadow_paths.is_empty() {
            return Err(Error::Data("non-shadow image list is empty".into()));
        }
        let shadow_set: BTreeSet<&PathBuf> = shadow_paths.iter().collect();
        if let Some(dup) = nonshadow_paths.iter().find(|p| shadow_set.contains(p)) {
            return Err(Error::Data(format!(
                "path {dup:?} appears in both the shadow and non-shadow lists"
            )));
        }
        Ok(UnpairedDataset {
            shadow_paths,
            nonshadow_paths,
        })
    }

    /// Draws one batch: `x` uniform over the shadow list; `(y1, y2)` uniform
    /// without replacement over the non-shadow list; all three augmented
    /// independently. Requires at least two non-shadow images.
    pub fn next_batch(&self, rng: &mut ChaCha8Rng, aug: &AugmentConfig) -> Result<TrainBatch> {
        let ny = self.nonshadow_paths.len();
        if ny < 2 {
            return Err(Error::Data(format!(
                "need at least 2 non-shadow images to draw two distinct real samples, found {ny}"
            )));
        }
        let xi = rng.random_range(0..self.shadow_paths.len());
        let yi = rng.random_range(0..ny);
        // uniform over the remaining indices
        let mut yj = rng.random_range(0..ny - 1);
        if yj >= yi {
            yj += 1;
        }
        let x = augment(&load_image(&self.shadow_paths[xi], Normalization::SignedUnit)?, rng, aug)?;
        let y1 = augment(&load_image(&self.nonshadow_paths[yi], Normalization::SignedUnit)?, rng, aug)?;
        let y2 = augment(&load_image(&self.nonshadow_paths[yj], Normalization::SignedUnit)?, rng, aug)?;
        Ok(TrainBatch {
            x,
            y1,
            y2,
            indices: (xi, yi, yj),
        })
    }
}

/// Resize-then-random-crop augmentation sizes (reference-scale 286→256,
/// desk-scale 72→64). Horizontal flip is off unless enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub pre_crop: usize,
    pub crop: usize,
    pub hflip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            pre_crop: 72,
            crop: 64,
            hflip: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.pre_crop == 0 {
            return Err(Error::Config("augment sizes must be positive".into()));
        }
        if self.crop > self.pre_crop {
            return Err(Error::Config(format!(
                "crop size {} exceeds pre-crop size {}",
                self.crop, self.pre_crop
            )));
        }
        Ok(())
    }
}

/// Bicubic resize to `pre_crop`², then a uniformly random `crop`² window.
/// Draw order per call: row offset, column offset, then (if enabled) the
/// flip coin — fixed so training streams are reproducible.
pub fn augment(img: &ImageTensor, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> Result<ImageTensor> {
    cfg.validate()?;
    let resized = resize_bicubic(img, cfg.pre_crop, cfg.pre_crop)?;
    let span = cfg.pre_crop - cfg.crop;
    let oy = rng.random_range(0..=span);
    let ox = rng.random_range(0..=span);
    let mut window = resized
        .data()
        .slice(ndarray::s![.., oy..oy + cfg.crop, ox..ox + cfg.crop])
        .to_owned();
    if cfg.hflip && rng.random::<bool>() {
        window = window.slice(ndarray::s![.., .., ..;-1]).to_owned();
    }
    ImageTensor::from_array(window)
}

/// Parameters of the procedural shadow corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_shadow: usize,
    pub n_nonshadow: usize,
    /// Square image side, a multiple of 8.
    pub image_size: usize,
    /// Shadow attenuation range `(lo, hi)` ⊂ (0, 1]: inside a hard mask the
    /// scene is multiplied by a value drawn from this range.
    pub attenuation: (f64, f64),
    /// Number of scene shapes drawn over the background gradient.
    pub shapes: (usize, usize),
    /// Accepted mask coverage band (fraction of pixels, pre-blur).
    pub coverage: (f64, f64),
    /// Gaussian blur of the mask edge, in pixels.
    pub edge_blur_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_shadow: 200,
            n_nonshadow: 200,
            image_size: 64,
            attenuation: (0.4, 0.7),
            shapes: (2, 5),
            coverage: (0.15, 0.45),
            edge_blur_sigma: 1.5,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (alo, ahi) = self.attenuation;
        if !(0.0 < alo && alo <= ahi && ahi <= 1.0) {
            return Err(Error::Config(format!(
                "attenuation range ({alo}, {ahi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if self.n_shadow == 0 || self.n_nonshadow < 2 {
            return Err(Error::Config(
                "need at least 1 shadow and 2 non-shadow images".into(),
            ));
        }
        let (clo, chi) = self.coverage;
        if !(0.0 < clo && clo < chi && chi < 1.0) {
            return Err(Error::Config(format!(
                "coverage band ({clo}, {chi}) must satisfy 0 < lo < hi < 1"
            )));
        }
        if self.shapes.0 > self.shapes.1 {
            return Err(Error::Config("shape count range is inverted".into()));
        }
        if !self.edge_blur_sigma.is_finite() || self.edge_blur_sigma < 0.0 {
            return Err(Error::Config("edge blur sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// One line of the evaluation manifest: paths are relative to the corpus
/// root. The ground truth and mask exist for evaluation only; training
/// never reads them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub shadow: String,
    pub gt: String,
    pub mask: String,
    pub attenuation: f64,
}

/// A generated corpus on disk.
#[derive(Debug, Clone)]
pub struct CorpusLayout {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub n_shadow: usize,
    pub n_nonshadow: usize,
}

// ---- procedural scene/mask construction (linear [0,1] space) -----------

/// Oriented ellipse or rectangle, in pixel coordinates.
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    theta: f64,
    rectangular: bool,
}

impl Blob {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        if self.rectangular {
            u.abs() <= self.rx && v.abs() <= self.ry
        } else {
            (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
        }
    }

    fn sample(rng: &mut ChaCha8Rng, size: f64, r_lo: f64, r_hi: f64) -> Blob {
        Blob {
            cx: rng.random_range(0.0..size),
            cy: rng.random_range(0.0..size),
            rx: rng.random_range(r_lo * size..r_hi * size),
            ry: rng.random_range(r_lo * size..r_hi * size),
            theta: rng.random_range(0.0..std::f64::consts::PI),
            rectangular: rng.random::<bool>(),
        }
    }
}

/// Smooth background + textured shapes; all channels in linear [0, 1].
fn synth_scene(rng: &mut ChaCha8Rng, size: usize, shapes: (usize, usize)) -> Array3<f64> {
    let s = size as f64;
    // bilinear gradient between four random corner colors
    let corners: Vec<[f64; 3]> = (0..4)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.25..0.95)))
        .collect();
    let mut img = Array3::<f64>::zeros((3, size, size));
    for y in 0..size {
        let fy = y as f64 / (s - 1.0).max(1.0);
        for x in 0..size {
            let fx = x as f64 / (s - 1.0).max(1.0);
            for ch in 0..3 {
                let top = corners[0][ch] * (1.0 - fx) + corners[1][ch] * fx;
                let bottom = corners[2][ch] * (1.0 - fx) + corners[3][ch] * fx;
                img[[ch, y, x]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    let n_shapes = rng.random_range(shapes.0..=shapes.1);
    for _ in 0..n_shapes {
        let blob = Blob::sample(rng, s, 0.08, 0.28);
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.95));
        // low-frequency luminance texture over the shape
        let amp = rng.random_range(0.0..0.08);
        let fx = rng.random_range(0.1..0.5);
        let fy = rng.random_range(0.1..0.5);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for y in 0..size {
            for x in 0..size {
                if blob.contains(x as f64, y as f64) {
                    let tex = amp * (fx * x as f64 + fy * y as f64 + phase).sin();
                    for ch in 0..3 {
                        img[[ch, y, x]] = (color[ch] + tex).clamp(0.02, 0.98);
                    }
                }
            }
        }
    }
    img.mapv_inplace(|v| v.clamp(0.02, 0.98));
    img
}

/// Union of a few blobs, rejected until pre-blur coverage falls inside the
/// configured band, then edge-blurred to a soft [0,1] mask.
fn synth_mask(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Result<Array2<f64>> {
    let size = spec.image_size;
    let (clo, chi) = spec.coverage;
    for _ in 0..200 {
        let n = rng.random_range(1..=3usize);
        let blobs: Vec<Blob> = (0..n)
            .map(|_| Blob::sample(rng, size as f64, 0.10, 0.32))
            .collect();
        let mut hard = Array2::<f64>::zeros((size, size));
        let mut inside = 0usize;
        for y in 0..size {
            for x in 0..size {
                if blobs.iter().any(|b| b.contains(x as f64, y as f64)) {
                    hard[[y, x]] = 1.0;
                    inside += 1;
                }
            }
        }
        let coverage = inside as f64 / (size * size) as f64;
        if coverage < clo || coverage > chi {
            continue;
        }
        return Ok(gaussian_blur(&hard, spec.edge_blur_sigma));
    }
    Err(Error::Data(format!(
        "mask sampler failed to hit coverage band ({clo}, {chi}) in 200 attempts"
    )))
}

/// Separable Gaussian blur with edge clamping; `sigma == 0` is the identity.
fn gaussian_blur(plane: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return plane.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (h, w) = plane.dim();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let sx = clamp(x as i64 + i as i64 - radius, w);
                acc += k * plane[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let sy = clamp(y as i64 + i as i64 - radius, h);
                acc += k * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Applies the multiplicative shadow model `base · (1 − (1−a)·m)` in linear
/// space.
fn apply_shadow(base: &Array3<f64>, mask: &Array2<f64>, attenuation: f64) -> Array3<f64> {
    let mut out = base.clone();
    let (_, h, w) = out.dim();
    for y in 0..h {
        for x in 0..w {
            let factor = 1.0 - (1.0 - attenuation) * mask[[y, x]];
            for ch in 0..3 {
                out[[ch, y, x]] *= factor;
            }
        }
    }
    out
}

fn encode_rgb(img: &Array3<f64>) -> Vec<u8> {
    let (_, h, w) = img.dim();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                bytes.push((img[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    bytes
}

fn encode_gray(plane: &Array2<f64>) -> Vec<u8> {
    plane
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn save_png_rgb(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (_, h, w) = img.dim();
    image::save_buffer(
        path,
        &encode_rgb(img),
        w as u32,
        h as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| Error::Data(format!("failed to write {path:?}: {e}")))
}

fn save_png_gray(path: &Path, plane: &Array2<f64>) -> Result<()> {
    let (h, w) = plane.dim();
    image::save_buffer(
        path,
        &encode_gray(plane),
        w as u32,
        h as u32,
        image::ColorType::L8,
    )
    .map_err(|e| Error::Data(format!("failed to write {path:?}: {e}")))
}

/// Generates the corpus under `out_root`:
/// `shadow/`, `nonshadow/`, `gt/`, `mask/`, and `manifest.jsonl`. Every
/// shadow image derives from a base scene that no non-shadow image reuses,
/// so the two sets are unpaired by construction. Bit-reproducible by seed.
pub fn synthesize_corpus(spec: &SynthSpec, out_root: &Path) -> Result<CorpusLayout> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for sub in ["shadow", "nonshadow", "gt", "mask"] {
        fs::create_dir_all(out_root.join(sub)).map_err(|e| Error::io(out_root.join(sub), e))?;
    }

    let mut manifest = Vec::with_capacity(spec.n_shadow);
    for i in 0..spec.n_shadow {
        let base = synth_scene(&mut rng, spec.image_size, spec.shapes);
        let mask = synth_mask(&mut rng, spec)?;
        let a = rng.random_range(spec.attenuation.0..=spec.attenuation.1);
        let shadowed = apply_shadow(&base, &mask, a);

        let shadow_rel = format!("shadow/s{i:04}.png");
        let gt_rel = format!("gt/s{i:04}.png");
        let mask_rel = format!("mask/s{i:04}.png");
        save_png_rgb(&out_root.join(&shadow_rel), &shadowed)?;
        save_png_rgb(&out_root.join(&gt_rel), &base)?;
        save_png_gray(&out_root.join(&mask_rel), &mask)?;
        manifest.push(ManifestEntry {
            shadow: shadow_rel,
            gt: gt_rel,
            mask: mask_rel,
            attenuation: a,
        });
    }
    for i in 0..spec.n_nonshadow {
        let scene = synth_scene(&mut rng, spec.image_size, spec.shapes);
        save_png_rgb(&out_root.join(format!("nonshadow/n{i:04}.png")), &scene)?;
    }

    let manifest_path = out_root.join("manifest.jsonl");
    let mut lines = String::new();
    for entry in &manifest {
        lines.push_str(
            &serde_json::to_string(entry)
                .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?,
        );
        lines.push('\n');
    }
    fs::write(&manifest_path, lines).map_err(|e| Error::io(&manifest_path, e))?;

    Ok(CorpusLayout {
        root: out_root.to_path_buf(),
        manifest: manifest_path,
        n_shadow: spec.n_shadow,
        n_nonshadow: spec.n_nonshadow,
    })
}

/// Reads `manifest.jsonl` back for evaluation.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(line).map_err(|e| {
            Error::Data(format!(
                "manifest {path:?} line {}: {e}",
                lineno + 1
            ))
        })?);
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("manifest {path:?} has no entries")));
    }
    Ok(entries)
}

use rand::SeedableRng;
